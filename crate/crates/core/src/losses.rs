//! Loss functions and their analytic gradients.
//!
//! * [`negative_cosine`]: `D(p, z) = −p̂·ẑ`, averaged over the batch, with
//!   `z` held constant (stop-gradient).
//! * [`simsiam_loss`]: `½D(p₁, z₂) + ½D(p₂, z₁)`.
//! * [`supcon_loss`]: supervised contrastive loss, log outside the positive
//!   sum, summed over anchors by default.
//! * [`total_loss`]: `(e^{−v₁}·l₁ + v₁) + (e^{−v₂}·l₂ + v₂)` with trainable
//!   log-variances.
//!
//! Everything here runs in `f64`; the network casts its embeddings at the
//! boundary.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::ViewEmbeddings;
use crate::pseudolabel::{l2_norm, normalize_rows, FeatureBatch, PseudoNegativeSet, UNIT_TOLERANCE};
use crate::{Error, Result, Tensor};

/// Default SupCon temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn check_pair(p: &Tensor<f64>, z: &Tensor<f64>) -> Result<()> {
    if p.shape() != z.shape() || p.shape().len() != 2 {
        return Err(Error::Shape(alloc::format!("p {:?} vs z {:?}", p.shape(), z.shape())));
    }
    if p.rows() == 0 {
        return Err(Error::Empty("embedding batch"));
    }
    Ok(())
}

/// Mean negative cosine similarity; `z` is treated as a constant.
pub fn negative_cosine(p: &Tensor<f64>, z: &Tensor<f64>) -> Result<f64> {
    negative_cosine_grad(p, z).map(|(loss, _)| loss)
}

/// Loss and `∂/∂p`. There is no `∂/∂z`: gradients never flow into `z`.
pub fn negative_cosine_grad(p: &Tensor<f64>, z: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    check_pair(p, z)?;
    let (n, d) = (p.rows(), p.cols());
    let mut grad = Tensor::zeros(&[n, d]);
    let mut total = 0.0;
    for i in 0..n {
        let (pi, zi) = (p.row(i), z.row(i));
        let (pn, zn) = (l2_norm(pi), l2_norm(zi));
        if pn == 0.0 {
            return Err(Error::ZeroNorm { index: i });
        }
        if zn == 0.0 {
            return Err(Error::ZeroNorm { index: i });
        }
        let cos: f64 = pi.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>() / (pn * zn);
        total -= cos;
        let g = &mut grad.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            // −(ẑ − p̂ cos)/‖p‖, averaged
            g[j] = -(zi[j] / zn - pi[j] / pn * cos) / pn / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Gradients of the symmetric loss. `z1`/`z2` are exactly zero: the loss
/// reaches the projector only through the predictor outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSiamGrad {
    pub p1: Tensor<f64>,
    pub p2: Tensor<f64>,
    pub z1: Tensor<f64>,
    pub z2: Tensor<f64>,
}

pub fn simsiam_loss(e: &ViewEmbeddings<f64>) -> Result<f64> {
    simsiam_loss_grad(e).map(|(l, _)| l)
}

pub fn simsiam_loss_grad(e: &ViewEmbeddings<f64>) -> Result<(f64, SimSiamGrad)> {
    if !(e.p1.is_finite() && e.p2.is_finite() && e.z1.is_finite() && e.z2.is_finite()) {
        return Err(Error::NonFinite("view embeddings"));
    }
    let (d12, mut g1) = negative_cosine_grad(&e.p1, &e.z2)?;
    let (d21, mut g2) = negative_cosine_grad(&e.p2, &e.z1)?;
    g1.data_mut().iter_mut().for_each(|g| *g *= 0.5);
    g2.data_mut().iter_mut().for_each(|g| *g *= 0.5);
    let zeros = Tensor::zeros(e.z1.shape());
    Ok((0.5 * d12 + 0.5 * d21, SimSiamGrad { p1: g1, p2: g2, z1: zeros.clone(), z2: zeros }))
}

/// How per-anchor SupCon terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Reduction {
    /// `Σ_{i∈I}`, as the loss is usually written.
    #[default]
    Sum,
    /// Divided by the number of contributing anchors.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassTag {
    Negative = 0,
    Positive = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupConBatch {
    /// `M×d`, unit rows.
    pub embeddings: Tensor<f64>,
    pub labels: Vec<ClassTag>,
    pub temperature: f64,
    pub reduction: Reduction,
    /// Anchors with a nonempty positive set; the others are excluded.
    pub anchors: Vec<usize>,
    /// `|P(i)|` for every row (zero for excluded anchors).
    pub positive_counts: Vec<usize>,
}

impl SupConBatch {
    pub fn new(embeddings: Tensor<f64>, labels: Vec<ClassTag>, temperature: f64) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() {
            return Err(Error::Shape(alloc::format!(
                "{} labels for embeddings {:?}",
                labels.len(),
                embeddings.shape()
            )));
        }
        if embeddings.rows() < 2 {
            return Err(Error::Empty("supcon batch needs at least two rows"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(alloc::format!("temperature must be > 0, got {temperature}")));
        }
        for i in 0..embeddings.rows() {
            if (l2_norm(embeddings.row(i)) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Shape(alloc::format!("supcon row {i} is not unit norm")));
            }
        }
        let positive_counts: Vec<usize> =
            labels.iter().map(|l| labels.iter().filter(|m| *m == l).count() - 1).collect();
        let anchors: Vec<usize> = (0..labels.len()).filter(|&i| positive_counts[i] > 0).collect();
        if anchors.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        Ok(Self { embeddings, labels, temperature, reduction: Reduction::Sum, anchors, positive_counts })
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `P(i)`: other rows sharing row `i`'s label.
    pub fn positive_set(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let l = self.labels[i];
        (0..self.len()).filter(move |&j| j != i && self.labels[j] == l)
    }
}

/// Positives first (tagged positive), then pseudo-negatives; rows normalized.
pub fn build_supcon_batch(
    positives: &FeatureBatch,
    pseudo_negatives: &PseudoNegativeSet,
    temperature: f64,
) -> Result<SupConBatch> {
    if positives.is_empty() {
        return Err(Error::Empty("positive features"));
    }
    if pseudo_negatives.is_empty() {
        return Err(Error::Empty("pseudo-negative set"));
    }
    let pos = if positives.normalized { positives.clone() } else { normalize_rows(positives)? };
    let neg = normalize_rows(&FeatureBatch::from_rows(pseudo_negatives.vectors.clone())?)?;
    let embeddings = Tensor::concat(&[&pos.vectors, &neg.vectors]);
    let mut labels = vec![ClassTag::Positive; pos.len()];
    labels.extend(core::iter::repeat_n(ClassTag::Negative, neg.len()));
    SupConBatch::new(embeddings, labels, temperature)
}

pub fn supcon_loss(batch: &SupConBatch) -> Result<f64> {
    supcon_loss_grad(batch).map(|(l, _)| l)
}

/// Loss and gradient with respect to the (unit) embedding rows.
pub fn supcon_loss_grad(batch: &SupConBatch) -> Result<(f64, Tensor<f64>)> {
    let z = &batch.embeddings;
    let (m, d) = (z.rows(), z.cols());
    let inv_tau = 1.0 / batch.temperature;
    let mut grad = Tensor::zeros(&[m, d]);
    let mut sim = vec![0.0; m * m];
    crate::scalar::matmul(&mut sim, z.data(), z.data(), m, d, m, false, true, false);

    let scale = match batch.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.anchors.len() as f64,
    };
    let mut total = 0.0;
    let mut weights = vec![0.0; m];
    for &i in &batch.anchors {
        let logits = &sim[i * m..(i + 1) * m];
        let max = (0..m).filter(|&a| a != i).map(|a| logits[a] * inv_tau).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for a in 0..m {
            weights[a] = if a == i { 0.0 } else { libm::exp(logits[a] * inv_tau - max) };
            denom += weights[a];
        }
        let lse = max + libm::log(denom);
        let n_pos = batch.positive_counts[i] as f64;
        let mean_pos: f64 = batch.positive_set(i).map(|p| logits[p] * inv_tau).sum::<f64>() / n_pos;
        total += lse - mean_pos;

        // coefficient on each z_j in ∂L_i/∂z_i, and on z_i in ∂L_i/∂z_j
        weights.iter_mut().for_each(|w| *w /= denom);
        let li = batch.labels[i];
        for j in 0..m {
            if j == i {
                continue;
            }
            let is_pos = if batch.labels[j] == li { 1.0 / n_pos } else { 0.0 };
            let c = (weights[j] - is_pos) * inv_tau * scale;
            if c == 0.0 {
                continue;
            }
            let (zi, zj) = (z.row(i), z.row(j));
            let g = grad.data_mut();
            for t in 0..d {
                g[i * d + t] += c * zj[t];
                g[j * d + t] += c * zi[t];
            }
        }
    }
    Ok((total * scale, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UncertaintyWeights {
    pub v1: f64,
    pub v2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalLossGrad {
    pub loss1: f64,
    pub loss2: f64,
    pub v1: f64,
    pub v2: f64,
}

pub fn total_loss(loss1: f64, loss2: f64, w: &UncertaintyWeights) -> f64 {
    (libm::exp(-w.v1) * loss1 + w.v1) + (libm::exp(-w.v2) * loss2 + w.v2)
}

pub fn total_loss_grad(loss1: f64, loss2: f64, w: &UncertaintyWeights) -> (f64, TotalLossGrad) {
    let (e1, e2) = (libm::exp(-w.v1), libm::exp(-w.v2));
    (total_loss(loss1, loss2, w), TotalLossGrad { loss1: e1, loss2: e2, v1: 1.0 - e1 * loss1, v2: 1.0 - e2 * loss2 })
}

/// Per-step scalars written to the training log. Absent branches are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub loss_cosine: Option<f64>,
    pub loss_super: Option<f64>,
    pub loss_total: f64,
    pub weights: UncertaintyWeights,
}
