//! Run configuration: command-line flag, then config file, then built-in
//! default (the seed additionally falls back to `ERNN_SEED`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ernn_core::model::{Architecture, ModelConfig};
use ernn_core::numerics::Precision;
use ernn_core::training::TrainConfig;
use serde::Deserialize;

pub const SEED_ENV: &str = "ERNN_SEED";

/// Keys accepted in a JSON config file. Flag `--batch-size` maps to key
/// `batch_size`, and so on.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub arch: Option<Architecture>,
    pub ns: Option<usize>,
    pub nh: Option<usize>,
    pub k: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub segment_len: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
    pub data: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

#[derive(Debug, Default, Clone, Args)]
pub struct ModelArgs {
    /// Architecture: ernn or lstm2.
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// State dimension N_s.
    #[arg(long)]
    pub ns: Option<usize>,
    /// Inner hidden dimension N_h (ernn only).
    #[arg(long)]
    pub nh: Option<usize>,
    /// Iteration count K (ernn only).
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDefaults {
    pub arch: Architecture,
    pub ns: usize,
    pub nh: usize,
    pub k: usize,
}

pub const MAIN_MODEL: ModelDefaults = ModelDefaults {
    arch: Architecture::Ernn,
    ns: 256,
    nh: 256,
    k: 3,
};

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Seed: flag, then file, then `ERNN_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

pub fn resolve_model(args: &ModelArgs, file: &FileConfig, defaults: ModelDefaults, seed: u64) -> Result<ModelConfig> {
    let arch = pick(args.arch, file.arch, defaults.arch);
    let ns = pick(args.ns, file.ns, defaults.ns);
    let cfg = match arch {
        Architecture::Ernn => ModelConfig::ernn(
            ns,
            pick(args.nh, file.nh, defaults.nh),
            pick(args.k, file.k, defaults.k),
        ),
        Architecture::Lstm2 => {
            if args.nh.is_some() || args.k.is_some() {
                bail!("--nh and --k apply to the ernn architecture only");
            }
            ModelConfig::lstm2(ns)
        }
    };
    cfg.validate()?;
    Ok(cfg.with_seed(seed))
}

#[derive(Debug, Default, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory (`<id>_noisy.wav` / `<id>_clean.wav`) or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training segment length in samples.
    #[arg(long)]
    pub segment_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint interval in epochs (0: final checkpoint only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
}

pub fn resolve_train(args: &TrainArgs, file: &FileConfig) -> Result<RunConfig> {
    let seed = resolve_seed(args.seed, file)?;
    let model = resolve_model(&args.model, file, MAIN_MODEL, seed)?;
    let d = TrainConfig::default();
    let data = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .context("no dataset given (use --data or the `data` config key)")?;
    let train = TrainConfig {
        batch_size: pick(args.batch_size, file.batch_size, d.batch_size),
        segment_len: pick(args.segment_len, file.segment_len, d.segment_len),
        epochs: pick(args.epochs, file.epochs, d.epochs),
        learning_rate: pick(args.lr, file.lr, d.learning_rate),
        seed,
        precision: pick(args.precision, file.precision, d.precision),
        checkpoint_every: pick(args.checkpoint_every, file.checkpoint_every, d.checkpoint_every),
        checkpoint_dir: Some(pick(
            args.checkpoint_dir.clone(),
            file.checkpoint_dir.clone(),
            PathBuf::from("checkpoints"),
        )),
    };
    train.validate()?;
    Ok(RunConfig { model, train, data })
}
