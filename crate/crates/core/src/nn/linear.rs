use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Module, Param};
use crate::scalar::matmul;
use crate::{Scalar, Tensor};

/// `y = x·Wᵀ + b` over `N×in` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out×in`, row-major.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let weight = Param::he_uniform(in_dim * out_dim, in_dim, rng);
        let bias = bias.then(|| {
            let bound = 1.0 / libm::sqrt(in_dim as f64);
            Param::new((0..out_dim).map(|_| T::lit(rng.random_range(-bound..bound))).collect())
        });
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.rows();
        assert_eq!(x.cols(), self.in_dim, "linear input width");
        let mut y = vec![T::zero(); n * self.out_dim];
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(self.out_dim) {
                row.copy_from_slice(&b.value);
            }
        }
        matmul(&mut y, x.data(), &self.weight.value, n, self.in_dim, self.out_dim, false, true, self.bias.is_some());
        Tensor::from_vec(&[n, self.out_dim], y)
    }

    /// Accumulates parameter gradients; returns `∂/∂x`.
    pub fn backward(&mut self, x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
        let n = x.rows();
        matmul(&mut self.weight.grad, grad.data(), x.data(), self.out_dim, n, self.in_dim, true, false, true);
        if let Some(b) = &mut self.bias {
            for row in grad.data().chunks(self.out_dim) {
                for (acc, &g) in b.grad.iter_mut().zip(row) {
                    *acc += g;
                }
            }
        }
        let mut dx = vec![T::zero(); n * self.in_dim];
        matmul(&mut dx, grad.data(), &self.weight.value, n, self.out_dim, self.in_dim, false, false, false);
        Tensor::from_vec(&[n, self.in_dim], dx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}
