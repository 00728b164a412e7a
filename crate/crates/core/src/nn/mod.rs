//! Layers with explicit forward caches and hand-written backward passes.
//!
//! A forward call returns its output plus whatever the backward pass needs;
//! several forwards through the same layer (two augmented views, a positive
//! batch) therefore coexist. Backward calls accumulate into [`Param::grad`].

mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, PoolCache};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub momentum: Vec<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Self { value, grad: vec![T::zero(); n], momentum: vec![T::zero(); n], decay: true }
    }

    pub fn filled(n: usize, v: T) -> Self {
        Self::new(vec![v; n])
    }

    /// He-uniform: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn he_uniform<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        Self::new((0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything holding parameters and non-trainable state buffers.
pub trait Module<T> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Non-trainable state (batch-norm running statistics).
    fn buffers(&self) -> Vec<&Vec<T>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        Vec::new()
    }

    fn zero_grad(&mut self)
    where
        T: Scalar,
    {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

pub fn relu<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    let zero = T::zero();
    for v in x.data_mut() {
        *v = if *v < zero { zero } else { *v };
    }
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    let zero = T::zero();
    for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
        *g = if y <= zero { zero } else { *g };
    }
}

/// Numerically stable softmax cross-entropy over rows of `logits`.
/// Returns the mean loss and `∂loss/∂logits`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> (f64, Tensor<T>) {
    let (n, c) = (logits.rows(), logits.cols());
    assert_eq!(n, targets.len());
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0;
    for i in 0..n {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64().unwrap()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        let lse = max + libm::log(denom);
        loss += lse - row[targets[i]];
        for (j, &v) in row.iter().enumerate() {
            let p = libm::exp(v - lse);
            let t = if j == targets[i] { 1.0 } else { 0.0 };
            grad.data_mut()[i * c + j] = T::lit((p - t) / n as f64);
        }
    }
    (loss / n as f64, grad)
}
