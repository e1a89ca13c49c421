//! Training, evaluation and embedding pipelines with their file outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{DatasetKind, RunConfig};
use crate::autodiff::{softmax, Tape};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, per_sample_losses, LossKind, SmoothingConfig};
use crate::metrics::{confusion_matrix, ece, MetricsReport};
use crate::nn::{checkpoint, mini_resnet_forward, Architecture, MiniResNetParams, PaddingMode};
use crate::plot;
use crate::tensor::Tensor;
use crate::tsne::{self, EmbeddingRun, TsneConfig};

pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_CURVE_FILE: &str = "losscurve.csv";
pub const LOSS_CURVE_SVG: &str = "losscurve.svg";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const RELIABILITY_SVG: &str = "reliability.svg";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const EMBEDDING_SVG: &str = "embedding.svg";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO_FILE: &str = "config.echo";

/// Smallest point count for which some perplexity ≥ 2 is feasible.
const MIN_EMBED_POINTS: usize = 7;

/// Train and validation halves of the configured dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

/// Loads or generates the dataset, applies the optional subsample and
/// splits it, all seeded by `data-seed`.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let full = load_full(cfg)?;
    let (train, val) = data::split(&full, cfg.val_fraction, cfg.data_seed)?;
    Ok(Splits { train, val })
}

/// Part of the configured dataset an evaluation or embedding runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    /// Everything before splitting.
    All,
    /// The held-out CIFAR-10 test batch.
    Test,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "all" => Ok(SplitChoice::All),
            "test" => Ok(SplitChoice::Test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?} (expected train, val, all or test)"
            ))),
        }
    }
}

pub fn load_split(cfg: &RunConfig, which: SplitChoice) -> Result<LabeledDataset> {
    match which {
        SplitChoice::All => load_full(cfg),
        SplitChoice::Train => Ok(load_splits(cfg)?.train),
        SplitChoice::Val => Ok(load_splits(cfg)?.val),
        SplitChoice::Test => match (cfg.dataset, &cfg.dataset_path) {
            (DatasetKind::Cifar10, Some(dir)) => Ok(data::load_cifar10(dir)?.test),
            _ => Err(Error::Usage("the test split exists only for cifar10".into())),
        },
    }
}

fn load_full(cfg: &RunConfig) -> Result<LabeledDataset> {
    let path = || {
        cfg.dataset_path
            .clone()
            .ok_or_else(|| Error::Config("dataset-path is not set".into()))
    };
    let full = match cfg.dataset {
        DatasetKind::Synthetic => {
            data::gen_synthetic(cfg.synthetic_counts, (cfg.image_size, cfg.image_size), cfg.data_seed)?
        }
        DatasetKind::Cifar10 => data::load_cifar10(&path()?)?.train,
        DatasetKind::Saved => data::load_dataset(&path()?)?,
    };
    if cfg.subset > 0 {
        data::stratified_subsample(&full, cfg.subset, cfg.data_seed)
    } else {
        Ok(full)
    }
}

fn architecture(ds: &LabeledDataset, padding: PaddingMode) -> Architecture {
    Architecture {
        in_channels: ds.image_shape().0,
        n_classes: ds.n_classes(),
        padding_mode: padding,
    }
}

fn smoothing(cfg: &RunConfig, n_classes: usize) -> Result<SmoothingConfig> {
    SmoothingConfig::new(cfg.epsilon, n_classes)
}

/// Network outputs over a whole dataset.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `N × classes` softmax probabilities.
    pub probs: Tensor<f64>,
    /// `N × 64` penultimate features.
    pub features: Tensor<f64>,
    /// Mean per-sample loss.
    pub loss: f64,
}

/// Forward pass over `ds` in order, `batch_size` samples at a time.
pub fn infer(
    params: &MiniResNetParams<f64>,
    ds: &LabeledDataset,
    loss: LossKind,
    smoothing: &SmoothingConfig,
    batch_size: usize,
) -> Result<Inference> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot run inference on an empty dataset".into()));
    }
    let mut probs = Vec::with_capacity(ds.len() * ds.n_classes());
    let mut features = Vec::new();
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(ds.batch(chunk));
        let out = mini_resnet_forward(&mut tape, params, x)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels()[i]).collect();
        let per = per_sample_losses(&mut tape, out.logits, &labels, loss, smoothing)?;
        loss_sum += tape.value(per).data().iter().sum::<f64>();
        probs.extend(softmax(tape.value(out.logits))?.into_data());
        features.extend_from_slice(tape.value(out.penultimate).data());
    }
    let n = ds.len();
    let width = features.len() / n;
    Ok(Inference {
        probs: Tensor::new(vec![n, ds.n_classes()], probs)?,
        features: Tensor::new(vec![n, width], features)?,
        loss: loss_sum / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `metrics.json` of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub val: MetricsReport,
    pub loss_kind: String,
    pub padding_mode: String,
    pub epochs_completed: u32,
    pub stopped_early: bool,
    pub parameter_updates: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub curve: Vec<EpochRecord>,
    pub params: MiniResNetParams<f64>,
    pub embedding: EmbeddingRun,
    pub output_dir: PathBuf,
}

/// Learning rate for 0-based `epoch`: ×0.1 from half the epochs on, ×0.01
/// from three quarters on.
pub fn learning_rate(base: f64, epoch: u32, epochs: u32) -> f64 {
    let half = epochs.div_ceil(2);
    let three_quarters = (3 * epochs).div_ceil(4);
    if epoch >= three_quarters {
        base * 0.01
    } else if epoch >= half {
        base * 0.1
    } else {
        base
    }
}

fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Runs the configured experiment and writes every artifact to the output
/// directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_output_dir(&cfg.output_dir)?;
    let splits = load_splits(cfg)?;
    train_on(cfg, &splits)
}

/// [`train`] on already loaded splits.
pub fn train_on(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_output_dir(&cfg.output_dir)?;
    let Splits { train, val } = splits;
    if val.len() < MIN_EMBED_POINTS {
        return Err(Error::Config(format!(
            "validation split has {} samples; the embedding needs at least {MIN_EMBED_POINTS}",
            val.len()
        )));
    }
    let n_classes = train.n_classes();
    let smoothing = smoothing(cfg, n_classes)?;
    let mut params = MiniResNetParams::<f64>::init(architecture(train, cfg.padding), cfg.seed)?;
    let mut velocity: Vec<Tensor<f64>> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut updates = 0u64;
    let mut stopped_early = false;
    let mut last_val = None;

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let at = |e: Error| {
                let detail = match e {
                    Error::Numerical(m) => m,
                    other => other.to_string(),
                };
                Error::Numerical(format!("epoch {} batch {}: {detail}", epoch + 1, b + 1))
            };
            let mut tape = Tape::new();
            let x = tape.constant(train.batch(chunk));
            let out = mini_resnet_forward(&mut tape, &params, x)?;
            let loss = batch_loss(&mut tape, out.logits, &labels, cfg.loss, &smoothing).map_err(at)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(at(Error::Numerical(format!("loss is {value}"))));
            }
            loss_sum += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f64>> = out.params.iter().map(|&v| grads.take(v)).collect();
            let norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(at(Error::Numerical(format!("gradient norm is {norm}"))));
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            params.for_each_mut(|i, p| {
                let v = velocity[i].data_mut();
                for ((vj, pj), gj) in v.iter_mut().zip(p.data_mut()).zip(grads[i].data()) {
                    *vj = cfg.momentum * *vj + clip * gj;
                    *pj -= lr * *vj;
                }
            });
            updates += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        let inf = infer(&params, val, cfg.loss, &smoothing, cfg.batch_size)?;
        if !inf.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "epoch {}: validation loss is {}",
                epoch + 1,
                inf.loss
            )));
        }
        curve.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss: inf.loss,
        });
        let val_loss = inf.loss;
        last_val = Some(inf);
        if val_loss < best - cfg.min_delta {
            best = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }

    let inf = last_val.expect("at least one epoch ran");
    let report = MetricsReport::from_probs(&inf.probs, val.labels(), inf.loss, cfg.ece_bins)?;
    let summary = TrainSummary {
        val: report,
        loss_kind: cfg.loss.to_string(),
        padding_mode: cfg.padding.to_string(),
        epochs_completed: curve.len() as u32,
        stopped_early,
        parameter_updates: updates,
    };

    let dir = &cfg.output_dir;
    write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_curve(dir, &curve)?;
    write_eval_tables(dir, &inf, val, cfg.ece_bins)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &params.named_tensors())?;
    write(dir.join(CONFIG_ECHO_FILE), cfg.echo())?;

    let (features, labels) = budgeted(&inf.features, val, cfg.embed_budget, cfg.data_seed)?;
    let tcfg = TsneConfig {
        perplexity: feasible_perplexity(cfg.embed_perplexity, labels.len()),
        iterations: cfg.embed_iterations,
        learning_rate: cfg.embed_learning_rate,
        seed: cfg.seed,
        ..TsneConfig::default()
    };
    let embedding = embed_features(&features, &labels, val.class_names(), &tcfg, dir)?;

    Ok(TrainOutcome {
        summary,
        curve,
        params,
        embedding,
        output_dir: dir.clone(),
    })
}

fn write_curve(dir: &Path, curve: &[EpochRecord]) -> Result<()> {
    let path = dir.join(LOSS_CURVE_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in curve {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let train: Vec<f64> = curve.iter().map(|r| r.train_loss).collect();
    let val: Vec<f64> = curve.iter().map(|r| r.val_loss).collect();
    let svg = plot::line_svg(
        &[("train", &train), ("validation", &val)],
        "Loss per epoch",
        "epoch",
        "loss",
    );
    write(dir.join(LOSS_CURVE_SVG), svg)
}

fn write_eval_tables(dir: &Path, inf: &Inference, ds: &LabeledDataset, bins: usize) -> Result<()> {
    let preds: Vec<usize> = (0..ds.len())
        .map(|r| crate::metrics::argmax(inf.probs.row(r)).0)
        .collect();
    let cm = confusion_matrix(&preds, ds.labels(), ds.n_classes())?;
    let path = dir.join(CONFUSION_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    cm.write_csv(file, ds.class_names())?;
    let table = ece(&inf.probs, ds.labels(), bins)?;
    let path = dir.join(RELIABILITY_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    table.write_csv(file)?;
    write(dir.join(RELIABILITY_SVG), plot::reliability_svg(&table))
}

fn feasible_perplexity(wanted: f64, n: usize) -> f64 {
    wanted.min((n - 1) as f64 / 3.0)
}

/// Features and labels, stratified-subsampled down to `budget` rows when larger.
fn budgeted(
    features: &Tensor<f64>,
    ds: &LabeledDataset,
    budget: usize,
    seed: u64,
) -> Result<(Tensor<f64>, Vec<usize>)> {
    if ds.len() <= budget {
        return Ok((features.clone(), ds.labels().to_vec()));
    }
    let keep = data::stratified_subsample_indices(ds, budget, seed)?;
    let width = features.shape()[1];
    let mut data = Vec::with_capacity(keep.len() * width);
    for &i in &keep {
        data.extend_from_slice(features.row(i));
    }
    let labels = keep.iter().map(|&i| ds.labels()[i]).collect();
    Ok((Tensor::new(vec![keep.len(), width], data)?, labels))
}

fn embed_features(
    features: &Tensor<f64>,
    labels: &[usize],
    class_names: &[String],
    cfg: &TsneConfig,
    dir: &Path,
) -> Result<EmbeddingRun> {
    let p = tsne::perplexity_affinities(features, cfg.perplexity)?;
    let run = tsne::tsne_optimize(&p, cfg)?;
    let path = dir.join(EMBEDDING_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    tsne::write_embedding_csv(file, &run.y, labels)?;
    let points: Vec<[f64; 2]> = (0..labels.len()).map(|i| [run.y.row(i)[0], run.y.row(i)[1]]).collect();
    let svg = plot::scatter_svg(&points, labels, class_names, "t-SNE of penultimate features");
    write(dir.join(EMBEDDING_SVG), svg)?;
    Ok(run)
}

/// Loads a checkpoint for a dataset's channel and class counts.
pub fn load_model(path: &Path, ds: &LabeledDataset, padding: PaddingMode) -> Result<MiniResNetParams<f64>> {
    let named = checkpoint::load::<f64>(path)?;
    MiniResNetParams::from_named(architecture(ds, padding), named)
}

/// Metrics of a checkpoint on `ds`, computed exactly as at the end of training.
pub fn evaluate(checkpoint_path: &Path, ds: &LabeledDataset, cfg: &RunConfig) -> Result<MetricsReport> {
    let params = load_model(checkpoint_path, ds, cfg.padding)?;
    evaluate_params(&params, ds, cfg)
}

pub fn evaluate_params(params: &MiniResNetParams<f64>, ds: &LabeledDataset, cfg: &RunConfig) -> Result<MetricsReport> {
    let smoothing = smoothing(cfg, ds.n_classes())?;
    let inf = infer(params, ds, cfg.loss, &smoothing, cfg.batch_size)?;
    MetricsReport::from_probs(&inf.probs, ds.labels(), inf.loss, cfg.ece_bins)
}

/// Writes the evaluation tables (`metrics.json`, confusion and reliability
/// CSVs) for a checkpoint into `dir`.
pub fn evaluate_to_dir(
    checkpoint_path: &Path,
    ds: &LabeledDataset,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<MetricsReport> {
    prepare_output_dir(dir)?;
    let params = load_model(checkpoint_path, ds, cfg.padding)?;
    let smoothing = smoothing(cfg, ds.n_classes())?;
    let inf = infer(&params, ds, cfg.loss, &smoothing, cfg.batch_size)?;
    let report = MetricsReport::from_probs(&inf.probs, ds.labels(), inf.loss, cfg.ece_bins)?;
    write(dir.join(METRICS_FILE), report.to_json()?)?;
    write_eval_tables(dir, &inf, ds, cfg.ece_bins)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub run: EmbeddingRun,
    pub labels: Vec<usize>,
}

/// Penultimate-feature t-SNE of `ds` written as CSV and SVG into `dir`.
/// Datasets above `budget` need `subsample`, which draws a stratified
/// subset of that size seeded by `tcfg.seed`.
pub fn embed(
    checkpoint_path: &Path,
    ds: &LabeledDataset,
    padding: PaddingMode,
    tcfg: &TsneConfig,
    budget: usize,
    subsample: Option<usize>,
    dir: &Path,
) -> Result<EmbedOutcome> {
    let params = load_model(checkpoint_path, ds, padding)?;
    embed_params(&params, ds, tcfg, budget, subsample, dir)
}

pub fn embed_params(
    params: &MiniResNetParams<f64>,
    ds: &LabeledDataset,
    tcfg: &TsneConfig,
    budget: usize,
    subsample: Option<usize>,
    dir: &Path,
) -> Result<EmbedOutcome> {
    let picked;
    let ds = match subsample {
        Some(k) if k < ds.len() => {
            picked = data::stratified_subsample(ds, k, tcfg.seed)?;
            &picked
        }
        _ => ds,
    };
    if ds.len() > budget {
        return Err(Error::Config(format!(
            "{} samples exceed the exact t-SNE budget of {budget}; pass --subsample {budget} (or smaller)",
            ds.len()
        )));
    }
    prepare_output_dir(dir)?;
    let smoothing = SmoothingConfig::with_classes(ds.n_classes().max(2))?;
    let inf = infer(params, ds, LossKind::Ce, &smoothing, 64)?;
    let run = embed_features(&inf.features, ds.labels(), ds.class_names(), tcfg, dir)?;
    Ok(EmbedOutcome {
        run,
        labels: ds.labels().to_vec(),
    })
}
