use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;

use softlabel::harness::{self, RunConfig, SplitChoice, CONFIG_ECHO_FILE};
use softlabel::tsne::TsneConfig;
use softlabel::{Error, Result};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Train, evaluate and embed mini-ResNet classifiers with hard or smoothed labels.
#[derive(Parser)]
#[command(name = "softlabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write every run artifact to the output directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// t-SNE of a checkpoint's penultimate features.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// synthetic, synthetic:A,B,C, cifar10:DIR or saved:DIR.
    #[arg(long)]
    dataset: Option<String>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Common,
    /// train, val, all or test (cifar10 only).
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    /// Also write metrics.json, confusion.csv and reliability.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    perplexity: Option<f64>,
    /// Stratified subsample size drawn before embedding.
    #[arg(long)]
    subsample: Option<u32>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "embedding")]
    out: PathBuf,
}

/// File config (or, for a checkpoint, the `config.echo` beside it), then
/// `--set` pairs, then the dataset spec.
fn base_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let echo = checkpoint.and_then(Path::parent).map(|d| d.join(CONFIG_ECHO_FILE));
    let mut cfg = match (&common.config, echo) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(echo)) if echo.is_file() => RunConfig::load(&echo)?,
        _ => RunConfig::default(),
    };
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(spec) = &common.dataset {
        cfg.set_dataset_spec(spec)?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, pairs: &[(&str, &Option<String>)]) -> Result<()> {
    for (key, value) in pairs {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train(a) => {
            let mut cfg = base_config(&a.common, None)?;
            apply(
                &mut cfg,
                &[
                    ("loss-kind", &a.loss),
                    ("padding-mode", &a.padding),
                    ("epsilon", &a.epsilon),
                    ("seed", &a.seed),
                    ("epochs", &a.epochs),
                    ("output-dir", &a.out),
                ],
            )?;
            let outcome = harness::train(&cfg)?;
            let s = &outcome.summary;
            let _ = writeln!(
                stdout,
                "{} epochs ({} updates){}: val accuracy {:.4}, macro F1 {:.4}, ECE {:.4}, loss {:.4}",
                s.epochs_completed,
                s.parameter_updates,
                if s.stopped_early { ", stopped early" } else { "" },
                s.val.accuracy,
                s.val.macro_f1,
                s.val.ece,
                s.val.loss
            );
            let _ = writeln!(stdout, "artifacts in {}", outcome.output_dir.display());
        }
        Command::Eval(a) => {
            let mut cfg = base_config(&a.common, Some(&a.checkpoint))?;
            apply(&mut cfg, &[("padding-mode", &a.padding), ("loss-kind", &a.loss)])?;
            cfg.validate()?;
            let ds = harness::load_split(&cfg, a.split.parse::<SplitChoice>()?)?;
            let report = match &a.out {
                Some(dir) => harness::evaluate_to_dir(&a.checkpoint, &ds, &cfg, dir)?,
                None => harness::evaluate(&a.checkpoint, &ds, &cfg)?,
            };
            let _ = write!(stdout, "{}", report.to_json()?);
        }
        Command::Embed(a) => {
            let mut cfg = base_config(&a.common, Some(&a.checkpoint))?;
            apply(&mut cfg, &[("padding-mode", &a.padding)])?;
            cfg.validate()?;
            let ds = harness::load_split(&cfg, a.split.parse::<SplitChoice>()?)?;
            let n = a.subsample.map_or(ds.len(), |k| (k as usize).min(ds.len()));
            let tcfg = TsneConfig {
                perplexity: a
                    .perplexity
                    .unwrap_or_else(|| cfg.embed_perplexity.min((n.max(7) - 1) as f64 / 3.0)),
                iterations: a.iterations.unwrap_or(cfg.embed_iterations),
                learning_rate: cfg.embed_learning_rate,
                seed: a.seed.unwrap_or(cfg.seed),
                ..TsneConfig::default()
            };
            let outcome = harness::embed(
                &a.checkpoint,
                &ds,
                cfg.padding,
                &tcfg,
                cfg.embed_budget,
                a.subsample.map(|k| k as usize),
                &a.out,
            )?;
            let _ = writeln!(
                stdout,
                "embedded {} samples (final KL {:.4}) into {}",
                outcome.labels.len(),
                outcome.run.kl_trace.last().copied().unwrap_or(f64::NAN),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
