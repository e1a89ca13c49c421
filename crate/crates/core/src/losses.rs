//! Cross-entropy, label-smoothed cross-entropy and its normalized variant.
//!
//! Every loss takes raw logits and goes through a fused log-softmax.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance on the unit-sum invariant of a target distribution.
pub const SUM_TOLERANCE: f64 = 1e-12;
/// Smallest accepted denominator of the normalized loss.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Class weights over `N` classes: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    probs: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("target distribution needs at least one class".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Contract(format!(
                "target weight {p} is not a non-negative number"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("target weights sum to {total}, not 1")));
        }
        Ok(TargetDistribution { probs })
    }

    pub fn one_hot(class: usize, n_classes: usize) -> Result<Self> {
        check_class(class, n_classes)?;
        let mut probs = vec![0.0; n_classes];
        probs[class] = 1.0;
        Ok(TargetDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn is_one_hot(&self) -> bool {
        self.probs.iter().filter(|&&p| p == 1.0).count() == 1 && self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    epsilon: f64,
    n_classes: usize,
}

impl SmoothingConfig {
    pub const DEFAULT_EPSILON: f64 = 0.1;

    pub fn new(epsilon: f64, n_classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        Ok(SmoothingConfig { epsilon, n_classes })
    }

    /// Default smoothing factor for `n_classes`.
    pub fn with_classes(n_classes: usize) -> Result<Self> {
        Self::new(Self::DEFAULT_EPSILON, n_classes)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn weights(&self, class: usize) -> Vec<f64> {
        let n = self.n_classes;
        let off = self.epsilon / n as f64;
        let mut w = vec![off; n];
        w[class] = (1.0 - self.epsilon) + off;
        w
    }
}

fn check_class(class: usize, n_classes: usize) -> Result<()> {
    if class >= n_classes {
        return Err(Error::Contract(format!(
            "class index {class} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// `(1 − ε)` on the true class plus `ε/N` everywhere.
pub fn smooth_targets(class: usize, cfg: &SmoothingConfig) -> Result<TargetDistribution> {
    check_class(class, cfg.n_classes)?;
    Ok(TargetDistribution {
        probs: cfg.weights(class),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ce,
    Lsce,
    Nlsce,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::Lsce, LossKind::Nlsce];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Lsce => "lsce",
            LossKind::Nlsce => "nlsce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "lsce" => Ok(LossKind::Lsce),
            "nlsce" => Ok(LossKind::Nlsce),
            other => Err(Error::Config(format!(
                "unknown loss kind {other:?} (expected ce, lsce or nlsce)"
            ))),
        }
    }
}

/// Class count of a single-sample logits node, shaped `[N]` or `[1, N]`.
fn sample_classes<T: Scalar>(tape: &Tape<T>, logits: Var, op: &'static str) -> Result<usize> {
    match *tape.shape(logits) {
        [n] | [1, n] => Ok(n),
        ref s => Err(Error::shape(op, &[s], "logits must be shaped [N] or [1, N]")),
    }
}

/// `−Σ_c target_c · log softmax(logits)_c`.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &TargetDistribution) -> Result<Var> {
    let n = sample_classes(tape, logits, "ce_loss")?;
    if n != target.n_classes() {
        return Err(Error::shape(
            "ce_loss",
            &[tape.shape(logits), &[target.n_classes()]],
            "logits and target lengths differ",
        ));
    }
    let shape = tape.shape(logits).to_vec();
    let t = Tensor::from_parts(shape, target.probs.iter().map(|&p| T::of(p)).collect());
    let t = tape.constant(t);
    let lp = tape.log_softmax(logits)?;
    let weighted = tape.mul(lp, t)?;
    let s = tape.sum(weighted)?;
    tape.scale(s, -T::one())
}

pub fn lsce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, class: usize, cfg: &SmoothingConfig) -> Result<Var> {
    let target = smooth_targets(class, cfg)?;
    ce_loss(tape, logits, &target)
}

/// `LSCE(class) / Σ_j LSCE(j)`, differentiated through both parts of the quotient.
pub fn norm_lsce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, class: usize, cfg: &SmoothingConfig) -> Result<Var> {
    let n = sample_classes(tape, logits, "norm_lsce_loss")?;
    if n != cfg.n_classes {
        return Err(Error::shape(
            "norm_lsce_loss",
            &[tape.shape(logits), &[cfg.n_classes]],
            "logits length differs from the smoothing class count",
        ));
    }
    check_class(class, n)?;
    let row = tape.reshape(logits, &[1, n])?;
    let per = smoothed_losses(tape, row, &[class], cfg, true)?;
    let q = tape.reshape(per, &[])?;
    Ok(q)
}

/// Mean over a `B×N` batch of per-sample losses. The normalized loss is
/// divided per sample before averaging.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    classes: &[usize],
    kind: LossKind,
    cfg: &SmoothingConfig,
) -> Result<Var> {
    let per = per_sample_losses(tape, logits, classes, kind, cfg)?;
    tape.mean(per)
}

/// Per-sample losses of a `B×N` batch as a `[B]` node.
pub fn per_sample_losses<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    classes: &[usize],
    kind: LossKind,
    cfg: &SmoothingConfig,
) -> Result<Var> {
    if classes.is_empty() {
        return Err(Error::Contract("batch loss over an empty batch".into()));
    }
    let shape = tape.shape(logits).to_vec();
    let [b, n] = shape[..] else {
        return Err(Error::shape("batch_loss", &[&shape], "logits must be B×N"));
    };
    if b != classes.len() {
        return Err(Error::shape(
            "batch_loss",
            &[&shape, &[classes.len()]],
            "one class index per row required",
        ));
    }
    if n != cfg.n_classes {
        return Err(Error::shape(
            "batch_loss",
            &[&shape, &[cfg.n_classes]],
            "logit width differs from the smoothing class count",
        ));
    }
    for &c in classes {
        check_class(c, n)?;
    }
    match kind {
        LossKind::Ce => {
            let one_hot = SmoothingConfig {
                epsilon: 0.0,
                n_classes: n,
            };
            smoothed_losses(tape, logits, classes, &one_hot, false)
        }
        LossKind::Lsce => smoothed_losses(tape, logits, classes, cfg, false),
        LossKind::Nlsce => smoothed_losses(tape, logits, classes, cfg, true),
    }
}

/// Row-wise smoothed cross-entropy of `B×N` logits, optionally divided by
/// the sum of the same loss over every possible class.
fn smoothed_losses<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    classes: &[usize],
    cfg: &SmoothingConfig,
    normalize: bool,
) -> Result<Var> {
    let n = cfg.n_classes;
    let b = classes.len();
    let targets: Vec<T> = classes.iter().flat_map(|&c| cfg.weights(c)).map(T::of).collect();
    let targets = tape.constant(Tensor::from_parts(vec![b, n], targets));
    let lp = tape.log_softmax(logits)?;
    let weighted = tape.mul(lp, targets)?;
    let neg = tape.sum_last(weighted)?;
    let num = tape.scale(neg, -T::one())?;
    if !normalize {
        return Ok(num);
    }
    // column j of the table holds the smoothed target of class j
    let table: Vec<T> = (0..n)
        .flat_map(|c| (0..n).map(move |j| (c, j)))
        .map(|(c, j)| T::of(cfg.weights(j)[c]))
        .collect();
    let table = tape.constant(Tensor::from_parts(vec![n, n], table));
    let all = tape.matmul(lp, table)?;
    let neg_den = tape.sum_last(all)?;
    let den = tape.scale(neg_den, -T::one())?;
    if let Some(d) = tape.value(den).data().iter().find(|d| d.as_f64() < DENOMINATOR_FLOOR) {
        return Err(Error::domain(
            "norm_lsce_loss",
            format!("denominator {d} is below {DENOMINATOR_FLOOR:e}"),
        ));
    }
    tape.div(num, den)
}
