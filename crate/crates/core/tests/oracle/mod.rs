//! Independent reference computations shared by the test targets.
#![allow(dead_code)]

use rand::Rng;
use sscl_core::losses::{ClassTag, SupConBatch};
use sscl_core::Tensor;

pub const H: f64 = 1e-6;

/// Counts, over every `draw`-subset of a pool whose first `positives` items
/// are positive, how many subsets hold each number of positives.
pub fn enumerate(pool: u32, positives: u32, draw: u32) -> Vec<f64> {
    let mut counts = vec![0u64; draw as usize + 1];
    let pos_mask = (1u32 << positives) - 1;
    let mut total = 0u64;
    for subset in 0u32..(1 << pool) {
        if subset.count_ones() == draw {
            counts[(subset & pos_mask).count_ones() as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

pub fn unit_rows(r: &mut impl Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// `Σ_i −1/|P(i)| Σ_{p∈P(i)} log(exp(zᵢ·zₚ/τ) / Σ_{a≠i} exp(zᵢ·zₐ/τ))`,
/// skipping anchors without positives.
pub fn naive_supcon(z: &[Vec<f64>], labels: &[ClassTag], tau: f64, mean: bool) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let mut denom = 0.0;
        for a in 0..m {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for &p in &pos {
            inner += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -inner / pos.len() as f64;
    }
    if mean {
        total / anchors as f64
    } else {
        total
    }
}

pub fn supcon_batch(z: &[Vec<f64>], labels: &[ClassTag], tau: f64) -> SupConBatch {
    let d = z[0].len();
    let t = Tensor::from_vec(&[z.len(), d], z.concat());
    SupConBatch::new(t, labels.to_vec(), tau).unwrap()
}

pub fn random_labels(r: &mut impl Rng, m: usize) -> Vec<ClassTag> {
    loop {
        let l: Vec<ClassTag> =
            (0..m).map(|_| if r.random_bool(0.5) { ClassTag::Positive } else { ClassTag::Negative }).collect();
        // at least one anchor needs a positive
        let pos = l.iter().filter(|&&t| t == ClassTag::Positive).count();
        if pos >= 2 || m - pos >= 2 {
            return l;
        }
    }
}

pub fn random(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// ‖a − n‖ / ‖n‖ over all coordinates.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data_mut()[i] += H;
            b.data_mut()[i] -= H;
            (f(&a) - f(&b)) / (2.0 * H)
        })
        .collect()
}

pub fn normalized(x: &Tensor<f64>) -> Tensor<f64> {
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Balanced accuracy from raw counts.
pub fn ba(tp: f64, fp: f64, tn: f64, fn_: f64) -> f64 {
    (tp / (tp + fn_) + tn / (tn + fp)) / 2.0
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of the per-class F1 scores, 0 where undefined.
pub fn macro_f1(tp: f64, fp: f64, tn: f64, fn_: f64) -> f64 {
    let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let pos = f1(safe(tp, tp + fp), safe(tp, tp + fn_));
    let neg = f1(safe(tn, tn + fn_), safe(tn, tn + fp));
    (pos + neg) / 2.0
}
