use alloc::vec::Vec;

use crate::nn::Param;
use crate::Scalar;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g ← ∇ + λw; m ← μm + g; w ← w − η·m`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, params: Vec<&mut Param<T>>) {
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        for p in params {
            let decay = p.decay;
            for ((w, g), m) in p.value.iter_mut().zip(&p.grad).zip(p.momentum.iter_mut()) {
                let mut g = *g;
                if decay {
                    g += wd * *w;
                }
                *m = mu * *m + g;
                *w -= lr * *m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn momentum_accumulates() {
        let sgd = Sgd { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut p = Param::<f64>::new(vec![1.0]);
        p.grad[0] = 1.0;
        sgd.step(vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-15);
        sgd.step(vec![&mut p]);
        // m = 0.9 + 1 = 1.9
        assert!((p.value[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn decay_skipped_when_disabled() {
        let sgd = Sgd { lr: 0.5, momentum: 0.0, weight_decay: 0.1 };
        let mut a = Param::<f64>::new(vec![2.0]);
        let mut b = Param::<f64>::new(vec![2.0]);
        b.decay = false;
        sgd.step(vec![&mut a, &mut b]);
        assert!((a.value[0] - 1.9).abs() < 1e-15);
        assert_eq!(b.value[0], 2.0);
    }
}
