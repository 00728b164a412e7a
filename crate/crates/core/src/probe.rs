//! Linear probe on frozen features.
//!
//! Features are standardized with the training split's statistics and fed to
//! one affine layer with two logits. The probe never sees the backbone, so
//! the backbone cannot change while probing.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::datagen::Split;
use crate::metrics::{Confusion, MetricsReport};
use crate::nn::{softmax_cross_entropy, Linear, Module};
use crate::optim::Sgd;
use crate::{rng, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Sgd,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 32, optimizer: Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 }, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub layer: Linear<f64>,
}

impl LinearProbe {
    pub fn new(train: &Tensor<f64>, seed: u64) -> Self {
        let (n, d) = (train.rows(), train.cols());
        let mut mean = alloc::vec![0.0; d];
        let mut var = alloc::vec![0.0; d];
        for r in train.data().chunks(d) {
            for j in 0..d {
                mean[j] += r[j] / n as f64;
            }
        }
        for r in train.data().chunks(d) {
            for j in 0..d {
                var[j] += (r[j] - mean[j]) * (r[j] - mean[j]) / n as f64;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / libm::sqrt(v + 1e-8)).collect();
        let layer = Linear::new(d, 2, true, &mut rng::substream(seed, 0x9b0e));
        Self { mean, inv_std, layer }
    }

    fn standardize(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let d = self.mean.len();
        let mut out = x.clone();
        for r in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.layer.forward(&self.standardize(x))
    }

    /// `true` where the positive logit wins.
    pub fn predict(&self, x: &Tensor<f64>) -> Vec<bool> {
        let l = self.logits(x);
        (0..l.rows()).map(|i| l.row(i)[1] > l.row(i)[0]).collect()
    }

    pub fn evaluate(&self, x: &Tensor<f64>, labels: &[bool], split: Split, epoch: u64) -> MetricsReport {
        let pred = self.predict(x);
        MetricsReport::new(split, epoch, Confusion::from_pairs(labels.iter().copied().zip(pred)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub probe: LinearProbe,
    /// 1-based epoch of the selected probe.
    pub best_epoch: u64,
    pub best: MetricsReport,
    /// Validation metrics after every epoch.
    pub history: Vec<MetricsReport>,
}

/// Trains the probe, keeping the epoch with the best validation metrics
/// (balanced accuracy, then macro F1, then earliest).
pub fn train_probe(
    train_x: &Tensor<f64>,
    train_y: &[bool],
    val_x: &Tensor<f64>,
    val_y: &[bool],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if train_y.is_empty() || val_y.is_empty() {
        return Err(Error::Unlabeled);
    }
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(Error::Shape("probe features and labels disagree".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("probe epochs and batch size must be positive".into()));
    }
    let mut probe = LinearProbe::new(train_x, cfg.seed);
    let xs = probe.standardize(train_x);
    let targets: Vec<usize> = train_y.iter().map(|&y| y as usize).collect();
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut rng = rng::substream(cfg.seed, 0x9b0f);
    let mut best: Option<(LinearProbe, MetricsReport)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs as u64 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xs.select(chunk);
            let tb: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            probe.layer.zero_grad();
            let logits = probe.layer.forward(&xb);
            let (_, g) = softmax_cross_entropy(&logits, &tb);
            probe.layer.backward(&xb, &g);
            cfg.optimizer.step(probe.layer.params_mut());
        }
        let report = probe.evaluate(val_x, val_y, Split::Val, epoch);
        history.push(report);
        let better = best.as_ref().is_none_or(|(_, b)| report.selection_cmp(b).is_gt());
        if better {
            best = Some((probe.clone(), report));
        }
    }
    let (probe, best) = best.unwrap();
    Ok(ProbeOutcome { probe, best_epoch: best.epoch, best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_clusters_are_learned() {
        let mut r = rng::seeded(11);
        let mut make = |n: usize| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let pos = i % 5 == 0;
                let c = if pos { 3.0 } else { -3.0 };
                for _ in 0..6 {
                    data.push(c + r.random_range(-1.0..1.0));
                }
                labels.push(pos);
            }
            (Tensor::from_vec(&[n, 6], data), labels)
        };
        let (tx, ty) = make(100);
        let (vx, vy) = make(50);
        let out = train_probe(&tx, &ty, &vx, &vy, &ProbeConfig { epochs: 10, ..Default::default() }).unwrap();
        assert!(out.best.balanced_accuracy >= 0.99);
    }

    #[test]
    fn empty_split_is_rejected() {
        let x = Tensor::zeros(&[0, 3]);
        assert_eq!(train_probe(&x, &[], &x, &[], &ProbeConfig::default()).unwrap_err(), Error::Unlabeled);
    }
}
