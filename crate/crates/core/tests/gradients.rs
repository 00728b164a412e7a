//! Analytic gradients against central finite differences, in f64.

mod oracle;

use oracle::{normalized, numeric_grad, random, rel_err, H};
use rand::Rng;
use sscl_core::losses::{
    simsiam_loss, simsiam_loss_grad, supcon_loss, supcon_loss_grad, total_loss, total_loss_grad, ClassTag, SupConBatch,
    UncertaintyWeights,
};
use sscl_core::model::{Architecture, BranchGrad, Classifier, Depth, EncoderConfig, SimSiam, ViewEmbeddings};
use sscl_core::nn::{softmax_cross_entropy, Mode, Module};
use sscl_core::pseudolabel::normalize_backward;
use sscl_core::{rng, Tensor};

const TOL: f64 = 1e-4;

#[test]
fn simsiam_gradient_and_stop_gradient() {
    let mut r = rng::seeded(1);
    for _ in 0..50 {
        let n = r.random_range(1..6);
        let d = r.random_range(2..9);
        let e = ViewEmbeddings {
            z1: random(&mut r, &[n, d]),
            z2: random(&mut r, &[n, d]),
            p1: random(&mut r, &[n, d]),
            p2: random(&mut r, &[n, d]),
        };
        let (_, g) = simsiam_loss_grad(&e).unwrap();
        let num1 = numeric_grad(&e.p1, |p| simsiam_loss(&ViewEmbeddings { p1: p.clone(), ..e.clone() }).unwrap());
        let num2 = numeric_grad(&e.p2, |p| simsiam_loss(&ViewEmbeddings { p2: p.clone(), ..e.clone() }).unwrap());
        assert!(rel_err(g.p1.data(), &num1) < TOL);
        assert!(rel_err(g.p2.data(), &num2) < TOL);
        assert!(g.z1.data().iter().chain(g.z2.data()).all(|&v| v == 0.0));
    }
}

#[test]
fn supcon_gradient_through_normalization() {
    let mut r = rng::seeded(2);
    for trial in 0..50 {
        let m = r.random_range(3..10);
        let d = r.random_range(2..8);
        let tau = [0.05, 0.1, 0.5][trial % 3];
        let mut labels = vec![ClassTag::Positive, ClassTag::Positive];
        labels.extend((2..m).map(|_| if r.random_bool(0.5) { ClassTag::Positive } else { ClassTag::Negative }));
        let raw = random(&mut r, &[m, d]);
        let loss =
            |x: &Tensor<f64>| supcon_loss(&SupConBatch::new(normalized(x), labels.clone(), tau).unwrap()).unwrap();
        let (_, g) = supcon_loss_grad(&SupConBatch::new(normalized(&raw), labels.clone(), tau).unwrap()).unwrap();
        let analytic: Vec<f64> = (0..m).flat_map(|i| normalize_backward(raw.row(i), g.row(i))).collect();
        let numeric = numeric_grad(&raw, loss);
        assert!(rel_err(&analytic, &numeric) < TOL, "trial {trial}: {}", rel_err(&analytic, &numeric));
    }
}

#[test]
fn total_loss_gradient_including_log_variances() {
    let mut r = rng::seeded(3);
    for _ in 0..50 {
        let x =
            [r.random_range(0.0..5.0), r.random_range(0.0..50.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let f = |x: &[f64; 4]| total_loss(x[0], x[1], &UncertaintyWeights { v1: x[2], v2: x[3] });
        let (_, g) = total_loss_grad(x[0], x[1], &UncertaintyWeights { v1: x[2], v2: x[3] });
        let analytic = [g.loss1, g.loss2, g.v1, g.v2];
        let numeric: Vec<f64> = (0..4)
            .map(|i| {
                let (mut a, mut b) = (x, x);
                a[i] += H;
                b[i] -= H;
                (f(&a) - f(&b)) / (2.0 * H)
            })
            .collect();
        assert!(rel_err(&analytic, &numeric) < TOL);
    }
}

fn tiny(architecture: Architecture) -> EncoderConfig {
    EncoderConfig {
        architecture,
        widths: vec![3, 4],
        depths: vec![1, 1],
        feature_dim: 8,
        input_side: 16,
        in_channels: 3,
    }
}

/// `J = Σ Gz⊙z + Σ Gp⊙p` checks every backward pass of the stack at once.
fn simsiam_param_check(architecture: Architecture, seed: u64) {
    let mut r = rng::seeded(seed);
    let mut model: SimSiam<f64> = SimSiam::new(tiny(architecture), &mut r).unwrap();
    let x = random(&mut r, &[4, 16, 16, 3]);
    let gz = random(&mut r, &[4, 8]);
    let gp = random(&mut r, &[4, 8]);
    let objective = |m: &mut SimSiam<f64>| {
        let out = m.forward_branch(&x, Depth::Predictor, Mode::Train).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        dot(out.z.as_ref().unwrap(), &gz) + dot(out.p.as_ref().unwrap(), &gp)
    };
    let mut probe = model.clone();
    let out = probe.forward_branch(&x, Depth::Predictor, Mode::Train).unwrap();
    probe.zero_grad();
    probe.backward_branch(&out, BranchGrad { h: None, z: Some(&gz), p: Some(&gp) });

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let n_params = model.params().len();
    for pi in 0..n_params {
        let len = model.params()[pi].value.len();
        for _ in 0..3 {
            let j = r.random_range(0..len);
            analytic.push(probe.params()[pi].grad[j]);
            let orig = model.params()[pi].value[j];
            model.params_mut()[pi].value[j] = orig + H;
            let a = objective(&mut model.clone());
            model.params_mut()[pi].value[j] = orig - H;
            let b = objective(&mut model.clone());
            model.params_mut()[pi].value[j] = orig;
            numeric.push((a - b) / (2.0 * H));
        }
    }
    let e = rel_err(&analytic, &numeric);
    assert!(e < TOL, "{architecture:?}: relative error {e}");
}

#[test]
fn small_conv_stack_backward() {
    for seed in 0..3 {
        simsiam_param_check(Architecture::SmallConv, seed);
    }
}

#[test]
fn residual_stack_backward() {
    for seed in 0..3 {
        simsiam_param_check(Architecture::ResNetLike, 10 + seed);
    }
}

#[test]
fn predictor_gradients_come_only_from_p() {
    let mut r = rng::seeded(7);
    let mut model: SimSiam<f64> = SimSiam::new(tiny(Architecture::SmallConv), &mut r).unwrap();
    let x = random(&mut r, &[4, 16, 16, 3]);
    let gz = random(&mut r, &[4, 8]);
    let out = model.forward_branch(&x, Depth::Predictor, Mode::Train).unwrap();
    model.zero_grad();
    model.backward_branch(&out, BranchGrad { h: None, z: Some(&gz), p: None });
    assert!(model.predictor.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    assert!(model.projector.params().iter().any(|p| p.grad.iter().any(|&g| g != 0.0)));
}

/// The siamese step hands the network only `∂/∂p`; encoder and projector
/// gradients must then equal those of an explicit two-pass construction in
/// which `z` is a detached copy.
#[test]
fn siamese_step_matches_detached_two_pass() {
    let mut r = rng::seeded(8);
    let model: SimSiam<f64> = SimSiam::new(tiny(Architecture::SmallConv), &mut r).unwrap();
    let (x1, x2) = (random(&mut r, &[4, 16, 16, 3]), random(&mut r, &[4, 16, 16, 3]));

    let mut a = model.clone();
    a.zero_grad();
    let b1 = a.forward_branch(&x1, Depth::Predictor, Mode::Train).unwrap();
    let b2 = a.forward_branch(&x2, Depth::Predictor, Mode::Train).unwrap();
    let e = ViewEmbeddings {
        z1: b1.z.clone().unwrap(),
        z2: b2.z.clone().unwrap(),
        p1: b1.p.clone().unwrap(),
        p2: b2.p.clone().unwrap(),
    };
    let (_, g) = simsiam_loss_grad(&e).unwrap();
    a.backward_branch(&b2, BranchGrad { h: None, z: Some(&g.z2), p: Some(&g.p2) });
    a.backward_branch(&b1, BranchGrad { h: None, z: Some(&g.z1), p: Some(&g.p1) });

    // two passes: targets computed first and frozen, then the loss against
    // constants
    let mut b = model.clone();
    let z1 = b.clone().forward_branch(&x1, Depth::Projector, Mode::Train).unwrap().z.unwrap();
    let z2 = b.clone().forward_branch(&x2, Depth::Projector, Mode::Train).unwrap().z.unwrap();
    b.zero_grad();
    let c1 = b.forward_branch(&x1, Depth::Predictor, Mode::Train).unwrap();
    let c2 = b.forward_branch(&x2, Depth::Predictor, Mode::Train).unwrap();
    let (_, g1) = sscl_core::losses::negative_cosine_grad(c1.p.as_ref().unwrap(), &z2).unwrap();
    let (_, g2) = sscl_core::losses::negative_cosine_grad(c2.p.as_ref().unwrap(), &z1).unwrap();
    let half = |t: Tensor<f64>| Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * 0.5).collect());
    b.backward_branch(&c2, BranchGrad { h: None, z: None, p: Some(&half(g2)) });
    b.backward_branch(&c1, BranchGrad { h: None, z: None, p: Some(&half(g1)) });

    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.grad, pb.grad);
    }
}

#[test]
fn classifier_backward() {
    let mut r = rng::seeded(9);
    let mut model: Classifier<f64> = Classifier::new(tiny(Architecture::SmallConv), &mut r).unwrap();
    let x = random(&mut r, &[5, 16, 16, 3]);
    let t = [0usize, 1, 1, 0, 1];
    let loss = |m: &mut Classifier<f64>| softmax_cross_entropy(&m.forward(&x, Mode::Train).logits, &t).0;
    let mut probe = model.clone();
    let out = probe.forward(&x, Mode::Train);
    let (_, g) = softmax_cross_entropy(&out.logits, &t);
    probe.zero_grad();
    probe.backward(&out, &g);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for pi in 0..model.params().len() {
        let len = model.params()[pi].value.len();
        for _ in 0..3 {
            let j = r.random_range(0..len);
            analytic.push(probe.params()[pi].grad[j]);
            let orig = model.params()[pi].value[j];
            model.params_mut()[pi].value[j] = orig + H;
            let a = loss(&mut model.clone());
            model.params_mut()[pi].value[j] = orig - H;
            let b = loss(&mut model.clone());
            model.params_mut()[pi].value[j] = orig;
            numeric.push((a - b) / (2.0 * H));
        }
    }
    assert!(rel_err(&analytic, &numeric) < TOL);
}
