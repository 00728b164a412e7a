//! Binary classification metrics for the imbalanced setting.

use core::cmp::Ordering;

use crate::datagen::Split;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Tallies `(truth, predicted)` pairs where `true` means positive.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (truth, pred) in pairs {
            match (truth, pred) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Mean of the per-class recalls. A class absent from the split is left
    /// out of the mean.
    pub fn balanced_accuracy(&self) -> f64 {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        match (pos, neg) {
            (0, 0) => 0.0,
            (0, _) => self.tn as f64 / neg as f64,
            (_, 0) => self.tp as f64 / pos as f64,
            _ => 0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64),
        }
    }

    /// F1 of the positive class, `2TP / (2TP + FP + FN)`, zero when undefined.
    pub fn f1_positive(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    /// F1 of the negative class (roles of the two classes swapped).
    pub fn f1_negative(&self) -> f64 {
        f1(self.tn, self.fn_, self.fp)
    }

    pub fn macro_f1(&self) -> f64 {
        0.5 * (self.f1_positive() + self.f1_negative())
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    pub epoch: u64,
    pub confusion: Confusion,
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
}

impl MetricsReport {
    pub fn new(split: Split, epoch: u64, confusion: Confusion) -> Self {
        Self {
            split,
            epoch,
            confusion,
            macro_f1: confusion.macro_f1(),
            balanced_accuracy: confusion.balanced_accuracy(),
        }
    }

    /// Model-selection order: balanced accuracy, then macro F1, then the
    /// earlier epoch. `Greater` means `self` is preferred.
    pub fn selection_cmp(&self, other: &Self) -> Ordering {
        self.balanced_accuracy
            .total_cmp(&other.balanced_accuracy)
            .then(self.macro_f1.total_cmp(&other.macro_f1))
            .then(other.epoch.cmp(&self.epoch))
    }
}
