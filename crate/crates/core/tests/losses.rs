use proptest::prelude::*;
use softlabel::autodiff::{grad_check, Tape};
use softlabel::losses::{
    batch_loss, ce_loss, lsce_loss, norm_lsce_loss, smooth_targets, LossKind, SmoothingConfig, TargetDistribution,
};
use softlabel::{Error, Tensor64};

fn eval(kind: LossKind, logits: &[f64], class: usize, eps: f64) -> f64 {
    let n = logits.len();
    let cfg = SmoothingConfig::new(eps, n).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor64::new(vec![n], logits.to_vec()).unwrap());
    let l = match kind {
        LossKind::Ce => ce_loss(&mut tape, z, &TargetDistribution::one_hot(class, n).unwrap()),
        LossKind::Lsce => lsce_loss(&mut tape, z, class, &cfg),
        LossKind::Nlsce => norm_lsce_loss(&mut tape, z, class, &cfg),
    }
    .unwrap();
    tape.value(l).item().unwrap()
}

fn logits_and_class() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..12).prop_flat_map(|n| (prop::collection::vec(-8.0..8.0f64, n), 0..n))
}

proptest! {
    #[test]
    fn shift_invariance((z, c) in logits_and_class(), shift in -50.0..50.0f64) {
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        for kind in LossKind::ALL {
            let a = eval(kind, &z, c, 0.1);
            let b = eval(kind, &shifted, c, 0.1);
            prop_assert!((a - b).abs() < 1e-10, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn lsce_without_smoothing_is_ce((z, c) in logits_and_class()) {
        prop_assert_eq!(eval(LossKind::Lsce, &z, c, 0.0), eval(LossKind::Ce, &z, c, 0.0));
    }

    #[test]
    fn nlsce_sums_to_one_over_classes((z, _) in logits_and_class(), eps in 0.0..0.9f64) {
        let total: f64 = (0..z.len()).map(|j| eval(LossKind::Nlsce, &z, j, eps)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn losses_are_nonnegative((z, c) in logits_and_class()) {
        for kind in LossKind::ALL {
            prop_assert!(eval(kind, &z, c, 0.1) >= 0.0);
        }
    }

    #[test]
    fn raising_the_true_logit_lowers_ce((z, c) in logits_and_class(), bump in 0.1..5.0f64) {
        let mut up = z.clone();
        up[c] += bump;
        prop_assert!(eval(LossKind::Ce, &up, c, 0.0) < eval(LossKind::Ce, &z, c, 0.0));
    }

    #[test]
    fn unsmoothed_nlsce_is_normalized_ce((z, c) in logits_and_class()) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let nll: Vec<f64> = z.iter().map(|v| lse - v).collect();
        let expected = nll[c] / nll.iter().sum::<f64>();
        let got = eval(LossKind::Nlsce, &z, c, 0.0);
        prop_assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn lsce_and_nlsce_rank_classes_alike((z, _) in logits_and_class(), eps in 0.0..0.9f64) {
        let argmin = |kind| {
            (0..z.len())
                .map(|j| (j, eval(kind, &z, j, eps)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0
        };
        prop_assert_eq!(argmin(LossKind::Lsce), argmin(LossKind::Nlsce));
    }
}

#[test]
fn uniform_logits() {
    for n in [2, 3, 10, 100] {
        let z = vec![0.37; n];
        assert!((eval(LossKind::Ce, &z, 0, 0.0) - (n as f64).ln()).abs() < 1e-12);
        assert!((eval(LossKind::Lsce, &z, n - 1, 0.1) - (n as f64).ln()).abs() < 1e-12);
        assert!((eval(LossKind::Nlsce, &z, 1, 0.1) - 1.0 / n as f64).abs() < 1e-12);
    }
}

#[test]
fn lsce_is_minimized_at_the_smoothed_target() {
    let cfg = SmoothingConfig::new(0.2, 4).unwrap();
    let target = smooth_targets(2, &cfg).unwrap();
    let at_target: Vec<f64> = target.probs().iter().map(|p| p.ln()).collect();
    let best = eval(LossKind::Lsce, &at_target, 2, 0.2);
    for delta in [-0.3, -0.05, 0.05, 0.3] {
        for k in 0..4 {
            let mut z = at_target.clone();
            z[k] += delta;
            assert!(eval(LossKind::Lsce, &z, 2, 0.2) > best);
        }
    }
}

#[test]
fn batch_gradients_for_every_kind() {
    let mut seed = 17u64;
    let mut next = || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (seed >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
    };
    for n in [2, 3, 10] {
        let logits = Tensor64::from_fn(vec![4, n], |_| next());
        let classes: Vec<usize> = (0..4).map(|i| (i * 7) % n).collect();
        let cfg = SmoothingConfig::new(0.1, n).unwrap();
        for kind in LossKind::ALL {
            let err = grad_check(|tape, z| batch_loss(tape, z, &classes, kind, &cfg), &logits, 1e-5).unwrap();
            assert!(err < 1e-4, "{kind} N={n}: {err}");
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let cfg = SmoothingConfig::new(0.1, 3).unwrap();
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor64::zeros(vec![2, 3]));
    assert!(matches!(
        batch_loss(&mut tape, z, &[0], LossKind::Ce, &cfg),
        Err(Error::Shape { .. })
    ));
    assert!(batch_loss(&mut tape, z, &[0, 3], LossKind::Lsce, &cfg).is_err());
    assert!(matches!(SmoothingConfig::new(1.0, 3), Err(Error::Config(_))));
    assert!(matches!(SmoothingConfig::new(0.1, 1), Err(Error::Config(_))));
    let wide = tape.constant(Tensor64::zeros(vec![2, 4]));
    assert!(matches!(
        batch_loss(&mut tape, wide, &[0, 1], LossKind::Nlsce, &cfg),
        Err(Error::Shape { .. })
    ));
}
