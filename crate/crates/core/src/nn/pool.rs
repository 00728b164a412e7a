use alloc::vec;
use alloc::vec::Vec;

use super::conv::dims;
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: [usize; 4],
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, PoolCache) {
    let [n, h, w, c] = dims(x);
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut y = vec![T::zero(); n * oh * ow * c];
    let mut argmax = vec![0u32; y.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if src[i] > best {
                            best = src[i];
                            at = i;
                        }
                    }
                    y[o + ch] = best;
                    argmax[o + ch] = at as u32;
                }
            }
        }
    }
    (Tensor::from_vec(&[n, oh, ow, c], y), PoolCache { argmax, in_shape: [n, h, w, c] })
}

pub fn max_pool2_backward<T: Scalar>(cache: &PoolCache, grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&cache.in_shape);
    let d = dx.data_mut();
    for (&i, &g) in cache.argmax.iter().zip(grad.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Mean over the spatial axes: `N×H×W×C → N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = dims(x);
    let mut y = vec![T::zero(); n * c];
    let scale = T::one() / T::from_usize(h * w).unwrap();
    for b in 0..n {
        let out = &mut y[b * c..(b + 1) * c];
        for px in x.item(b).chunks(c) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= scale);
    }
    Tensor::from_vec(&[n, c], y)
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let scale = T::one() / T::from_usize(h * w).unwrap();
    let mut dx = Tensor::zeros(in_shape);
    for b in 0..n {
        let g = grad.row(b);
        for px in dx.data_mut()[b * h * w * c..(b + 1) * h * w * c].chunks_mut(c) {
            for (o, &v) in px.iter_mut().zip(g) {
                *o = v * scale;
            }
        }
    }
    dx
}
