//! One optimizer step of semi-supervised pretraining, and of the
//! cross-entropy baseline.
//!
//! The network runs in `f32`; losses and their gradients are computed in
//! `f64` on the (small) embedding matrices and cast back.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::losses::{
    build_supcon_batch, simsiam_loss_grad, supcon_loss_grad, total_loss_grad, LossReport, Reduction, UncertaintyWeights,
};
use crate::model::{BranchGrad, Classifier, Depth, SimSiam, ViewEmbeddings};
use crate::nn::{softmax_cross_entropy, Mode, Module, Param};
use crate::optim::Sgd;
use crate::pseudolabel::{
    normalize_backward, synthesize_pseudo_negatives, FeatureBatch, PseudoConfig, PseudoNegativeSet,
};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LossMode {
    /// Siamese loss only.
    Loss1,
    /// Supervised contrastive loss on positives and pseudo-negatives only.
    Loss2,
    /// Both, fused by learned uncertainty weights.
    #[cfg_attr(feature = "serde", serde(rename = "loss1+2"))]
    Both,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Loss1 => "loss1",
            LossMode::Loss2 => "loss2",
            LossMode::Both => "loss1+2",
        }
    }

    pub fn uses_siamese(self) -> bool {
        self != LossMode::Loss2
    }

    pub fn uses_supervised(self) -> bool {
        self != LossMode::Loss1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PretrainConfig {
    pub mode: LossMode,
    pub optimizer: Sgd,
    pub temperature: f64,
    pub reduction: Reduction,
    pub pseudo: PseudoConfig,
    /// Added to the siamese loss before fusion. The raw loss lies in
    /// `[−1, 1]`; with a negative value the log-variance term has no minimum
    /// and `v₁` runs off to −∞. An offset of 1 keeps it non-negative without
    /// changing any parameter gradient at fixed weights.
    pub cosine_offset: f64,
    /// Also run the labeled positives' two views through the siamese loss
    /// (loss1+2 only; the unlabeled batch alone otherwise).
    pub cosine_on_positives: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Both,
            optimizer: Sgd { lr: 0.1, momentum: 0.9, weight_decay: 1e-4 },
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            reduction: Reduction::Sum,
            pseudo: PseudoConfig::default(),
            cosine_offset: 1.0,
            cosine_on_positives: false,
        }
    }
}

/// Inputs of one step. `view2` is needed when the siamese loss is active,
/// `positives` when the supervised loss is.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub view1: &'a Tensor<f32>,
    pub view2: Option<&'a Tensor<f32>>,
    pub positives: Option<&'a Tensor<f32>>,
    /// Second view of the positives, needed with `cosine_on_positives`.
    pub positives_view2: Option<&'a Tensor<f32>>,
    /// Dataset index of every unlabeled row.
    pub sources: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    pub pseudo: Option<PseudoNegativeSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pretrainer {
    pub model: SimSiam<f32>,
    /// `[v₁, v₂]`, never weight-decayed.
    pub uncertainty: Param<f64>,
    pub cfg: PretrainConfig,
    pub steps: u64,
}

fn rows(t: &Tensor<f64>, range: core::ops::Range<usize>) -> Tensor<f64> {
    let d = t.cols();
    Tensor::from_vec(&[range.len(), d], t.data()[range.start * d..range.end * d].to_vec())
}

impl Pretrainer {
    pub fn new(model: SimSiam<f32>, cfg: PretrainConfig) -> Self {
        let mut uncertainty = Param::new(vec![0.0, 0.0]);
        uncertainty.decay = false;
        Self { model, uncertainty, cfg, steps: 0 }
    }

    pub fn weights(&self) -> UncertaintyWeights {
        UncertaintyWeights { v1: self.uncertainty.value[0], v2: self.uncertainty.value[1] }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, batch: &StepBatch<'_>, rng: &mut R) -> Result<StepOutcome> {
        let mode = self.cfg.mode;
        let n = batch.view1.dim(0);
        if batch.sources.len() != n {
            return Err(Error::Shape("one source index per unlabeled row is required".into()));
        }
        let positives = match (mode.uses_supervised(), batch.positives) {
            (true, Some(p)) if p.dim(0) > 0 => Some(p),
            (true, _) => return Err(Error::Empty("labeled positives")),
            (false, _) => None,
        };
        let input = match positives {
            Some(p) => Tensor::concat(&[batch.view1, p]),
            None => batch.view1.clone(),
        };
        let depth = if mode.uses_siamese() { Depth::Predictor } else { Depth::Projector };

        self.model.zero_grad();
        self.uncertainty.zero_grad();
        let b1 = self.model.forward_branch(&input, depth, Mode::Train)?;
        let z1: Tensor<f64> = b1.z.as_ref().unwrap().cast();
        if !z1.is_finite() {
            return Err(Error::NonFinite("projector output"));
        }
        let rows_total = z1.rows();

        // rows of the first branch that enter the siamese loss
        let cos_rows = if self.cfg.cosine_on_positives && positives.is_some() { rows_total } else { n };
        let mut siamese = None;
        if mode.uses_siamese() {
            let view2 = batch.view2.ok_or(Error::Empty("second view"))?;
            let joined;
            let view2 = if cos_rows > n {
                let p2 = batch.positives_view2.ok_or(Error::Empty("second view of the positives"))?;
                joined = Tensor::concat(&[view2, p2]);
                &joined
            } else {
                view2
            };
            let b2 = self.model.forward_branch(view2, Depth::Predictor, Mode::Train)?;
            let p1: Tensor<f64> = b1.p.as_ref().unwrap().cast();
            let e = ViewEmbeddings {
                z1: rows(&z1, 0..cos_rows),
                z2: b2.z.as_ref().unwrap().cast(),
                p1: rows(&p1, 0..cos_rows),
                p2: b2.p.as_ref().unwrap().cast(),
            };
            let (loss, g) = simsiam_loss_grad(&e)?;
            siamese = Some((loss, g, b2));
        }

        let mut supervised = None;
        if let Some(p) = positives {
            let np = p.dim(0);
            let f_un = FeatureBatch::new(rows(&z1, 0..n), batch.sources.to_vec())?;
            let f_pos = FeatureBatch::new(rows(&z1, n..n + np), (0..np).collect())?;
            let set = synthesize_pseudo_negatives(&f_un, &f_pos, &self.cfg.pseudo, rng)?;
            let sc = build_supcon_batch(&f_pos, &set, self.cfg.temperature)?.with_reduction(self.cfg.reduction);
            let (loss, g) = supcon_loss_grad(&sc)?;
            // map unit-row gradients back onto the raw projector rows
            let d = z1.cols();
            let mut gz = Tensor::<f64>::zeros(&[rows_total, d]);
            let raw_rows = (n..n + np).chain(set.rows.iter().copied());
            for (r, raw) in raw_rows.enumerate() {
                let back = normalize_backward(z1.row(raw), g.row(r));
                let dst = &mut gz.data_mut()[raw * d..(raw + 1) * d];
                dst.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            supervised = Some((loss, gz, set));
        }

        let w = self.weights();
        let l1 = siamese.as_ref().map(|s| s.0);
        let l2 = supervised.as_ref().map(|s| s.0);
        let (total, c1, c2) = match (l1, l2) {
            (Some(a), Some(b)) => {
                let (t, g) = total_loss_grad(a + self.cfg.cosine_offset, b, &w);
                self.uncertainty.grad = vec![g.v1, g.v2];
                (t, g.loss1, g.loss2)
            }
            (Some(a), None) => (a, 1.0, 0.0),
            (None, Some(b)) => (b, 0.0, 1.0),
            (None, None) => unreachable!("every mode enables a loss"),
        };
        if !total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }

        let scale = |t: &Tensor<f64>, c: f64| -> Tensor<f32> {
            Tensor::from_vec(t.shape(), t.data().iter().map(|v| (v * c) as f32).collect())
        };
        let gz1 = supervised.as_ref().map(|s| scale(&s.1, c2));
        let mut gp1 = None;
        if let Some((_, g, b2)) = &siamese {
            let d = g.p1.cols();
            let mut full = Tensor::<f64>::zeros(&[rows_total, d]);
            full.data_mut()[..cos_rows * d].copy_from_slice(g.p1.data());
            gp1 = Some(scale(&full, c1));
            let gp2 = scale(&g.p2, c1);
            self.model.backward_branch(b2, BranchGrad { h: None, z: None, p: Some(&gp2) });
        }
        self.model.backward_branch(&b1, BranchGrad { h: None, z: gz1.as_ref(), p: gp1.as_ref() });

        self.cfg.optimizer.step(self.model.params_mut());
        if l1.is_some() && l2.is_some() {
            self.cfg.optimizer.step(vec![&mut self.uncertainty]);
        }
        self.steps += 1;
        Ok(StepOutcome {
            report: LossReport { step: self.steps, loss_cosine: l1, loss_super: l2, loss_total: total, weights: w },
            pseudo: supervised.map(|s| s.2),
        })
    }
}

/// One cross-entropy step of the fully supervised arm; returns the mean loss.
pub fn supervised_step(model: &mut Classifier<f32>, x: &Tensor<f32>, targets: &[bool], sgd: &Sgd) -> Result<f64> {
    if x.dim(0) != targets.len() || targets.is_empty() {
        return Err(Error::Shape("one target per image is required".into()));
    }
    model.zero_grad();
    let out = model.forward(x, Mode::Train);
    let t: Vec<usize> = targets.iter().map(|&y| y as usize).collect();
    let (loss, g) = softmax_cross_entropy(&out.logits, &t);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy"));
    }
    model.backward(&out, &g);
    sgd.step(model.params_mut());
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig { widths: vec![4, 8], feature_dim: 8, input_side: 16, ..EncoderConfig::desk() }
    }

    fn images(r: &mut impl Rng, n: usize) -> Tensor<f32> {
        Tensor::from_vec(&[n, 16, 16, 3], (0..n * 16 * 16 * 3).map(|_| r.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn loss1_mode_leaves_weights_alone() {
        let mut r = rng::seeded(3);
        let model = SimSiam::new(tiny(), &mut r).unwrap();
        let mut t = Pretrainer::new(model, PretrainConfig { mode: LossMode::Loss1, ..Default::default() });
        let (a, b) = (images(&mut r, 8), images(&mut r, 8));
        let src: Vec<usize> = (0..8).collect();
        let out = t
            .step(
                &StepBatch { view1: &a, view2: Some(&b), positives: None, positives_view2: None, sources: &src },
                &mut r,
            )
            .unwrap();
        assert!(out.report.loss_super.is_none() && out.pseudo.is_none());
        assert_eq!(t.weights(), UncertaintyWeights::default());
    }

    #[test]
    fn fused_step_moves_both_weights() {
        let mut r = rng::seeded(4);
        let model = SimSiam::new(tiny(), &mut r).unwrap();
        let cfg = PretrainConfig { pseudo: PseudoConfig { k: 4 }, ..Default::default() };
        let mut t = Pretrainer::new(model, cfg);
        let (a, b, p) = (images(&mut r, 16), images(&mut r, 16), images(&mut r, 3));
        let src: Vec<usize> = (100..116).collect();
        let out = t
            .step(
                &StepBatch { view1: &a, view2: Some(&b), positives: Some(&p), positives_view2: None, sources: &src },
                &mut r,
            )
            .unwrap();
        let set = out.pseudo.unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.source.iter().all(|s| (100..116).contains(s)));
        let w = t.weights();
        assert!(w.v1 != 0.0 && w.v2 != 0.0);
    }

    #[test]
    fn positives_can_join_the_siamese_loss() {
        let mut r = rng::seeded(6);
        let model = SimSiam::new(tiny(), &mut r).unwrap();
        let (a, b, p, q) = (images(&mut r, 16), images(&mut r, 16), images(&mut r, 3), images(&mut r, 3));
        let src: Vec<usize> = (0..16).collect();
        let cfg = PretrainConfig { pseudo: PseudoConfig { k: 4 }, ..Default::default() };
        let loss = |cfg: PretrainConfig, q: Option<&Tensor<f32>>| {
            let mut t = Pretrainer::new(model.clone(), cfg);
            let batch =
                StepBatch { view1: &a, view2: Some(&b), positives: Some(&p), positives_view2: q, sources: &src };
            t.step(&batch, &mut rng::seeded(7)).map(|o| o.report.loss_cosine.unwrap())
        };
        let with = PretrainConfig { cosine_on_positives: true, ..cfg };
        assert!(loss(with, None).is_err());
        assert_ne!(loss(with, Some(&q)).unwrap(), loss(cfg, Some(&q)).unwrap());
        // the second view of the positives is ignored when the flag is off
        assert_eq!(loss(cfg, Some(&q)).unwrap(), loss(cfg, None).unwrap());
    }

    #[test]
    fn missing_positives_is_an_error() {
        let mut r = rng::seeded(5);
        let model = SimSiam::new(tiny(), &mut r).unwrap();
        let mut t = Pretrainer::new(model, PretrainConfig { mode: LossMode::Loss2, ..Default::default() });
        let a = images(&mut r, 16);
        let src: Vec<usize> = (0..16).collect();
        assert!(t
            .step(&StepBatch { view1: &a, view2: None, positives: None, positives_view2: None, sources: &src }, &mut r)
            .is_err());
    }
}
