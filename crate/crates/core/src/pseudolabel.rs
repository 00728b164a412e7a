//! Pseudo-negative synthesis by similarity ranking against a labeled
//! positive anchor, and the exact hypergeometric purity of a random draw.
//!
//! When positives are rare, a random subgroup of unlabeled samples is almost
//! surely all negative. Ranking a subgroup by cosine similarity to a known
//! positive and taking the median member avoids both the most
//! positive-looking sample (possibly a true positive) and the least similar
//! outliers.

use alloc::vec::Vec;

use rand::Rng;

use crate::{Error, Result, Tensor};

/// Rows whose L2 norm must be within this of 1 when `normalized` is set.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// `N×d` embedding matrix with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub vectors: Tensor<f64>,
    pub normalized: bool,
    /// Index of each row in the originating dataset.
    pub source: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(vectors: Tensor<f64>, source: Vec<usize>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::Shape(alloc::format!("feature batch must be 2-d, got {:?}", vectors.shape())));
        }
        if vectors.rows() == 0 {
            return Err(Error::Empty("feature batch"));
        }
        if source.len() != vectors.rows() {
            return Err(Error::Shape(alloc::format!("{} source indices for {} rows", source.len(), vectors.rows())));
        }
        Ok(Self { vectors, normalized: false, source })
    }

    /// Rows numbered `0..n` in order.
    pub fn from_rows(vectors: Tensor<f64>) -> Result<Self> {
        let n = vectors.shape().first().copied().unwrap_or(0);
        Self::new(vectors, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Scales every row to unit L2 norm.
pub fn normalize_rows(batch: &FeatureBatch) -> Result<FeatureBatch> {
    let d = batch.dim();
    let mut out = batch.vectors.clone();
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let norm = l2_norm(row);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm { index: i });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(FeatureBatch { vectors: out, normalized: true, source: batch.source.clone() })
}

/// Chain rule through `u = x / ‖x‖`: maps `∂L/∂u` to `∂L/∂x`.
pub fn normalize_backward(raw: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let norm = l2_norm(raw);
    let dot: f64 = raw.iter().zip(grad_unit).map(|(x, g)| x * g).sum::<f64>() / norm;
    raw.iter().zip(grad_unit).map(|(x, g)| (g - (x / norm) * dot) / norm).collect()
}

/// Dot product of two unit vectors, clamped against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PseudoConfig {
    /// Subgroup size.
    pub k: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { k: 16 }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(alloc::format!("subgroup size k must be ≥ 2, got {}", self.k)));
        }
        Ok(())
    }

    /// 0-based position of the selected member in ascending similarity order
    /// (the lower median for even `k`).
    pub fn median_rank(&self) -> usize {
        self.k.div_ceil(2) - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoNegativeSet {
    /// `⌊X/k⌋×d`, unit rows.
    pub vectors: Tensor<f64>,
    /// Row of each selected member within the unlabeled batch.
    pub rows: Vec<usize>,
    /// Source index of each selected member.
    pub source: Vec<usize>,
    /// Row of the anchor within the positive batch.
    pub anchor: usize,
    /// Anchor similarity of every subgroup member, in subgroup order.
    pub similarities: Vec<Vec<f64>>,
    /// Unlabeled rows left over after forming full subgroups.
    pub dropped: usize,
}

impl PseudoNegativeSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Ranks each `k`-member subgroup of `unlabeled` (taken in row order, the
/// remainder dropped) by cosine similarity to one randomly drawn positive
/// anchor and keeps the median member as a pseudo-negative.
///
/// Ties are broken by the smaller source index.
pub fn synthesize_pseudo_negatives<R: Rng + ?Sized>(
    unlabeled: &FeatureBatch,
    positives: &FeatureBatch,
    cfg: &PseudoConfig,
    rng: &mut R,
) -> Result<PseudoNegativeSet> {
    cfg.validate()?;
    let k = cfg.k;
    if unlabeled.len() < k {
        return Err(Error::TooFewUnlabeled { needed: k, got: unlabeled.len() });
    }
    if positives.is_empty() {
        return Err(Error::Empty("positive features"));
    }
    if unlabeled.dim() != positives.dim() {
        return Err(Error::Shape(alloc::format!(
            "unlabeled dim {} != positive dim {}",
            unlabeled.dim(),
            positives.dim()
        )));
    }
    let un = if unlabeled.normalized { unlabeled.clone() } else { normalize_rows(unlabeled)? };
    let pos = if positives.normalized { positives.clone() } else { normalize_rows(positives)? };

    let groups = un.len() / k;
    let anchor = rng.random_range(0..pos.len());
    let anchor_vec = pos.row(anchor);
    let rank = cfg.median_rank();

    let d = un.dim();
    let mut vectors = Vec::with_capacity(groups * d);
    let mut rows = Vec::with_capacity(groups);
    let mut source = Vec::with_capacity(groups);
    let mut similarities = Vec::with_capacity(groups);
    let mut order: Vec<usize> = Vec::with_capacity(k);
    for g in 0..groups {
        let start = g * k;
        let sims: Vec<f64> = (start..start + k).map(|r| cosine_similarity(un.row(r), anchor_vec)).collect();
        order.clear();
        order.extend(0..k);
        order.sort_by(|&a, &b| {
            sims[a].total_cmp(&sims[b]).then(un.source[start + a].cmp(&un.source[start + b])).then(a.cmp(&b))
        });
        let chosen = start + order[rank];
        vectors.extend_from_slice(un.row(chosen));
        rows.push(chosen);
        source.push(un.source[chosen]);
        similarities.push(sims);
    }
    Ok(PseudoNegativeSet {
        vectors: Tensor::from_vec(&[groups, d], vectors),
        rows,
        source,
        anchor,
        similarities,
        dropped: un.len() - groups * k,
    })
}

/// Exact distribution of the positive count in a draw without replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct PurityEstimate {
    pub pool: u64,
    pub positives: u64,
    pub draw: u64,
    /// `p(n)` for `n = 0..=min(positives, draw)`.
    pub pmf: Vec<f64>,
    /// `p(n' ≤ n)`.
    pub cdf: Vec<f64>,
}

impl PurityEstimate {
    pub fn exactly(&self, n: usize) -> f64 {
        self.pmf.get(n).copied().unwrap_or(0.0)
    }

    pub fn at_most(&self, n: usize) -> f64 {
        self.cdf.get(n).copied().unwrap_or(1.0)
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0)
}

/// `p(n) = C(K,n)·C(N−K,m−n) / C(N,m)`, evaluated in log space.
///
/// The denominator is the log-sum-exp of the numerators (Vandermonde's
/// identity), so the returned masses sum to one up to a few ulps even for
/// pools in the hundreds of thousands.
pub fn purity_exact(pool: u64, positives: u64, draw: u64) -> Result<PurityEstimate> {
    if positives > pool || draw == 0 || draw > pool {
        return Err(Error::PurityBounds { pool, positives, draw });
    }
    let negatives = pool - positives;
    let top = positives.min(draw);
    let log_terms: Vec<f64> = (0..=top)
        .map(|n| {
            if draw - n > negatives {
                f64::NEG_INFINITY
            } else {
                ln_choose(positives, n) + ln_choose(negatives, draw - n)
            }
        })
        .collect();
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_terms.iter().map(|&l| libm::exp(l - max)).collect();
    let total: f64 = scaled.iter().sum();
    let pmf: Vec<f64> = scaled.iter().map(|s| s / total).collect();
    let mut acc = 0.0;
    let cdf = pmf
        .iter()
        .map(|p| {
            acc += p;
            acc.min(1.0)
        })
        .collect();
    Ok(PurityEstimate { pool, positives, draw, pmf, cdf })
}
