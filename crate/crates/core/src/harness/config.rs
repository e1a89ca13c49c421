//! Run configuration in `key = value` text form.
//!
//! Blank lines and `#` comments are ignored, every key is optional, and an
//! unknown key is an error. [`RunConfig::echo`] writes every key in a fixed
//! order, and parsing that text gives back the same configuration.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DEFAULT_COUNTS;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::DEFAULT_BINS;
use crate::nn::PaddingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    /// A directory written by [`crate::data::save_dataset`].
    Saved,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Saved => "saved",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "saved" => Ok(DatasetKind::Saved),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected synthetic, cifar10 or saved)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub loss: LossKind,
    pub padding: PaddingMode,
    pub epsilon: f64,
    pub dataset: DatasetKind,
    pub dataset_path: Option<PathBuf>,
    pub synthetic_counts: [usize; 3],
    pub image_size: usize,
    /// Stratified subsample drawn before splitting; 0 keeps everything.
    pub subset: usize,
    /// Seeds dataset generation, subsampling and the split.
    pub data_seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global L2 gradient-norm ceiling per update; 0 disables clipping.
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Seeds initialization and shuffling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub patience: u32,
    pub min_delta: f64,
    pub ece_bins: usize,
    pub embed_perplexity: f64,
    pub embed_iterations: usize,
    pub embed_learning_rate: f64,
    pub embed_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            loss: LossKind::Nlsce,
            padding: PaddingMode::Zero,
            epsilon: 0.1,
            dataset: DatasetKind::Synthetic,
            dataset_path: None,
            synthetic_counts: DEFAULT_COUNTS,
            image_size: 32,
            subset: 0,
            data_seed: 0,
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            grad_clip: 1.0,
            val_fraction: 0.25,
            seed: 0,
            output_dir: PathBuf::from("run"),
            patience: 10,
            min_delta: 1e-4,
            ece_bins: DEFAULT_BINS,
            embed_perplexity: 30.0,
            embed_iterations: 1000,
            embed_learning_rate: 200.0,
            embed_budget: 5000,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_counts(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(Error::Usage(format!(
            "synthetic-counts needs three comma-separated counts, got {value:?}"
        )));
    };
    Ok([
        parse_value("synthetic-counts", a)?,
        parse_value("synthetic-counts", b)?,
        parse_value("synthetic-counts", c)?,
    ])
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "loss-kind",
        "padding-mode",
        "epsilon",
        "dataset",
        "dataset-path",
        "synthetic-counts",
        "image-size",
        "subset",
        "data-seed",
        "epochs",
        "batch-size",
        "learning-rate",
        "momentum",
        "grad-clip",
        "val-fraction",
        "seed",
        "output-dir",
        "convergence-patience",
        "min-delta",
        "ece-bins",
        "embed-perplexity",
        "embed-iterations",
        "embed-learning-rate",
        "embed-budget",
    ];

    /// Sets one key. Enumerated values keep their own error messages; every
    /// failure comes back as a usage error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enum_err = |e: Error| Error::Usage(e.to_string());
        match key {
            "loss-kind" => self.loss = value.parse().map_err(enum_err)?,
            "padding-mode" => self.padding = value.parse().map_err(enum_err)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "dataset" => self.dataset = value.parse().map_err(enum_err)?,
            "dataset-path" => {
                self.dataset_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "synthetic-counts" => self.synthetic_counts = parse_counts(value)?,
            "image-size" => self.image_size = parse_value(key, value)?,
            "subset" => self.subset = parse_value(key, value)?,
            "data-seed" => self.data_seed = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch-size" => self.batch_size = parse_value(key, value)?,
            "learning-rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "grad-clip" => self.grad_clip = parse_value(key, value)?,
            "val-fraction" => self.val_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "output-dir" => self.output_dir = PathBuf::from(value),
            "convergence-patience" => self.patience = parse_value(key, value)?,
            "min-delta" => self.min_delta = parse_value(key, value)?,
            "ece-bins" => self.ece_bins = parse_value(key, value)?,
            "embed-perplexity" => self.embed_perplexity = parse_value(key, value)?,
            "embed-iterations" => self.embed_iterations = parse_value(key, value)?,
            "embed-learning-rate" => self.embed_learning_rate = parse_value(key, value)?,
            "embed-budget" => self.embed_budget = parse_value(key, value)?,
            other => return Err(Error::Usage(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Usage(format!("line {}: {}", i + 1, strip_usage(e))))?;
        }
        Ok(cfg)
    }

    /// Applies a dataset spec: `synthetic`, `synthetic:A,B,C`, `cifar10:DIR`
    /// or `saved:DIR`.
    pub fn set_dataset_spec(&mut self, spec: &str) -> Result<()> {
        let (kind, arg) = match spec.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (spec, None),
        };
        self.set("dataset", kind)?;
        match (self.dataset, arg) {
            (DatasetKind::Synthetic, Some(counts)) => self.set("synthetic-counts", counts),
            (DatasetKind::Synthetic, None) => Ok(()),
            (_, Some(dir)) if !dir.is_empty() => self.set("dataset-path", dir),
            (_, _) if self.dataset_path.is_some() => Ok(()),
            (kind, _) => Err(Error::Usage(format!(
                "dataset spec {spec:?} needs a directory, e.g. {}:DIR",
                kind.name()
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text listing every key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let counts = self.synthetic_counts.map(|c| c.to_string()).join(",");
        let path = self
            .dataset_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let values: [String; 24] = [
            self.loss.to_string(),
            self.padding.to_string(),
            self.epsilon.to_string(),
            self.dataset.name().to_string(),
            path,
            counts,
            self.image_size.to_string(),
            self.subset.to_string(),
            self.data_seed.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.momentum.to_string(),
            self.grad_clip.to_string(),
            self.val_fraction.to_string(),
            self.seed.to_string(),
            self.output_dir.display().to_string(),
            self.patience.to_string(),
            self.min_delta.to_string(),
            self.ece_bins.to_string(),
            self.embed_perplexity.to_string(),
            self.embed_iterations.to_string(),
            self.embed_learning_rate.to_string(),
            self.embed_budget.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.ece_bins == 0 {
            return bad("epochs, batch-size, convergence-patience and ece-bins must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning-rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val-fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad-clip must be non-negative, got {}", self.grad_clip));
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min-delta must be non-negative, got {}", self.min_delta));
        }
        if self.image_size < crate::nn::MIN_INPUT_SIZE {
            return bad(format!("image-size must be at least {}", crate::nn::MIN_INPUT_SIZE));
        }
        if self.embed_iterations == 0 || self.embed_budget == 0 {
            return bad("embed-iterations and embed-budget must be positive".into());
        }
        if !(self.embed_learning_rate > 0.0 && self.embed_learning_rate.is_finite()) {
            return bad(format!(
                "embed-learning-rate must be positive, got {}",
                self.embed_learning_rate
            ));
        }
        if matches!(self.dataset, DatasetKind::Cifar10 | DatasetKind::Saved) && self.dataset_path.is_none() {
            return bad(format!("dataset {} needs dataset-path", self.dataset.name()));
        }
        Ok(())
    }
}

fn strip_usage(e: Error) -> String {
    match e {
        Error::Usage(m) => m,
        other => other.to_string(),
    }
}
