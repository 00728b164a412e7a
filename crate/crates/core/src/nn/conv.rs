use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Module, Param};
use crate::scalar::matmul;
use crate::{Scalar, Tensor};

/// Square-kernel 2-d convolution over channels-last batches, lowered to a
/// single matrix product via im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(kernel·kernel·in)×out`; row index `(ky·kernel + kx)·in + c`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = Param::he_uniform(fan_in * out_channels, fan_in, rng);
        let bias = bias.then(|| Param::filled(out_channels, T::zero()));
        Self { in_channels, out_channels, kernel, stride, padding: kernel / 2, weight, bias }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Kernel columns `kx0..kx1` that land inside a row of width `w` for
    /// output column `ox`.
    fn valid_taps(&self, ox: usize, w: usize) -> (usize, usize) {
        let start = (ox * self.stride) as isize - self.padding as isize;
        let kx0 = (-start).max(0) as usize;
        let kx1 = ((w as isize - start).max(0) as usize).min(self.kernel);
        (kx0, kx1)
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let [n, h, w, c] = dims(x);
        let (oh, ow) = (self.output_side(h), self.output_side(w));
        let k = self.kernel;
        let patch = self.patch_len();
        let mut cols = vec![T::zero(); n * oh * ow * patch];
        let src = x.data();
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    let (kx0, kx1) = self.valid_taps(ox, w);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize || kx0 >= kx1 {
                            continue;
                        }
                        // taps kx0..kx1 are adjacent input pixels: one copy
                        let ix0 = ox * self.stride + kx0 - self.padding;
                        let s = ((b * h + iy as usize) * w + ix0) * c;
                        let d = row + (ky * k + kx0) * c;
                        let len = (kx1 - kx0) * c;
                        cols[d..d + len].copy_from_slice(&src[s..s + len]);
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let [n, h, w, c] = dims(x);
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = (self.output_side(h), self.output_side(w));
        let rows = n * oh * ow;
        let cols = self.im2col(x);
        let mut y = vec![T::zero(); rows * self.out_channels];
        if let Some(b) = &self.bias {
            for r in y.chunks_mut(self.out_channels) {
                r.copy_from_slice(&b.value);
            }
        }
        matmul(
            &mut y,
            &cols,
            &self.weight.value,
            rows,
            self.patch_len(),
            self.out_channels,
            false,
            false,
            self.bias.is_some(),
        );
        (Tensor::from_vec(&[n, oh, ow, self.out_channels], y), ConvCache { cols, in_shape: [n, h, w, c] })
    }

    /// Accumulates parameter gradients; returns `∂/∂x` when requested.
    pub fn backward(&mut self, cache: &ConvCache<T>, grad: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let [n, h, w, c] = cache.in_shape;
        let (oh, ow) = (self.output_side(h), self.output_side(w));
        let rows = n * oh * ow;
        let patch = self.patch_len();
        let co = self.out_channels;
        matmul(&mut self.weight.grad, &cache.cols, grad.data(), patch, rows, co, true, false, true);
        if let Some(b) = &mut self.bias {
            for r in grad.data().chunks(co) {
                for (acc, &g) in b.grad.iter_mut().zip(r) {
                    *acc += g;
                }
            }
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * patch];
        matmul(&mut dcols, grad.data(), &self.weight.value, rows, co, patch, false, true, false);

        let k = self.kernel;
        let mut dx = vec![T::zero(); n * h * w * c];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    let (kx0, kx1) = self.valid_taps(ox, w);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize || kx0 >= kx1 {
                            continue;
                        }
                        let ix0 = ox * self.stride + kx0 - self.padding;
                        let d = ((b * h + iy as usize) * w + ix0) * c;
                        let s = row + (ky * k + kx0) * c;
                        let len = (kx1 - kx0) * c;
                        for (acc, &g) in dx[d..d + len].iter_mut().zip(&dcols[s..s + len]) {
                            *acc += g;
                        }
                    }
                }
            }
        }
        Some(Tensor::from_vec(&[n, h, w, c], dx))
    }
}

pub(crate) fn dims<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected an N×H×W×C batch, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

impl<T: Scalar> Module<T> for Conv2d<T> {
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
