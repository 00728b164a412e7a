use alloc::vec;
use alloc::vec::Vec;

use super::{Mode, Module, Param};
use crate::{Scalar, Tensor};

/// Batch normalization over the last axis (features of `N×C`, channels of
/// `N×H×W×C`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    /// `(γ, β)`; absent for a non-affine normalization.
    pub affine: Option<(Param<T>, Param<T>)>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            channels,
            affine: affine.then(|| (Param::filled(channels, T::one()), Param::filled(channels, T::zero()))),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BnCache<T>) {
        let c = self.channels;
        assert_eq!(x.cols(), c, "batch-norm channels");
        let rows = x.rows();
        let eps = T::lit(self.eps);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mean = channel_sums(x.data(), c, |v, _| v).into_iter().map(|s| s / rows as f64).collect::<Vec<_>>();
                let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
                let var: Vec<f64> = channel_sums(x.data(), c, |v, j| {
                    let d = v - mean_t[j];
                    d * d
                })
                .into_iter()
                .map(|s| s / rows as f64)
                .collect();
                let mom = self.momentum;
                let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                for j in 0..c {
                    let rm = self.running_mean[j].to_f64().unwrap();
                    let rv = self.running_var[j].to_f64().unwrap();
                    self.running_mean[j] = T::lit((1.0 - mom) * rm + mom * mean[j]);
                    self.running_var[j] = T::lit((1.0 - mom) * rv + mom * var[j] * unbias);
                }
                let inv: Vec<T> = var.iter().map(|v| T::lit(1.0 / libm::sqrt(v + self.eps))).collect();
                (mean_t, inv)
            }
            Mode::Eval => {
                (self.running_mean.clone(), self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
            }
        };
        let mut xhat = x.data().to_vec();
        for r in xhat.chunks_exact_mut(c) {
            for ((v, &m), &s) in r.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let mut y = xhat.clone();
        if let Some((g, b)) = &self.affine {
            for r in y.chunks_exact_mut(c) {
                for ((v, &g), &b) in r.iter_mut().zip(&g.value).zip(&b.value) {
                    *v = *v * g + b;
                }
            }
        }
        (Tensor::from_vec(x.shape(), y), BnCache { xhat, inv_std, batch_stats: mode == Mode::Train })
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let c = self.channels;
        let rows = grad.rows();
        let mut g = grad.data().to_vec();
        let (mut sum_g, mut sum_gx) = (vec![T::zero(); c], vec![T::zero(); c]);
        if self.affine.is_some() || cache.batch_stats {
            for (gr, xr) in g.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for (((sg, sgx), &gv), &xv) in sum_g.iter_mut().zip(sum_gx.iter_mut()).zip(gr).zip(xr) {
                    *sg += gv;
                    *sgx += gv * xv;
                }
            }
        }
        // per-channel coefficients: dx = a·g + b + e·x̂
        let mut a = cache.inv_std.clone();
        let (mut b, mut e) = (vec![T::zero(); c], vec![T::zero(); c]);
        if let Some((gamma, beta)) = &mut self.affine {
            for j in 0..c {
                gamma.grad[j] += sum_gx[j];
                beta.grad[j] += sum_g[j];
                a[j] *= gamma.value[j];
                sum_g[j] *= gamma.value[j];
                sum_gx[j] *= gamma.value[j];
            }
        }
        if cache.batch_stats {
            let n = T::from_usize(rows).unwrap();
            for j in 0..c {
                b[j] = -cache.inv_std[j] * sum_g[j] / n;
                e[j] = -cache.inv_std[j] * sum_gx[j] / n;
            }
        }
        for (gr, xr) in g.chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
            for ((((gv, &xv), &a), &b), &e) in gr.iter_mut().zip(xr).zip(&a).zip(&b).zip(&e) {
                *gv = a * *gv + b + e * xv;
            }
        }
        Tensor::from_vec(grad.shape(), g)
    }
}

/// Per-channel sums of `f(value, channel)`, accumulated in blocks of rows in
/// `T` and across blocks in `f64`.
fn channel_sums<T: Scalar>(data: &[T], c: usize, f: impl Fn(T, usize) -> T) -> Vec<f64> {
    let mut total = vec![0.0f64; c];
    let mut part = vec![T::zero(); c];
    for block in data.chunks(c * 64) {
        part.iter_mut().for_each(|p| *p = T::zero());
        for r in block.chunks_exact(c) {
            for (j, (p, &v)) in part.iter_mut().zip(r).enumerate() {
                *p += f(v, j);
            }
        }
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p.to_f64().unwrap();
        }
    }
    total
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.affine.as_ref().map(|(g, b)| vec![g, b]).unwrap_or_default()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.affine.as_mut().map(|(g, b)| vec![g, b]).unwrap_or_default()
    }

    fn buffers(&self) -> Vec<&Vec<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}
