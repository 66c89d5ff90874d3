use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use ernn_core::diagnostics::{gradient_norm_traces, TraceConfig};
use ernn_core::dsp::{Stft, StftConfig, SAMPLE_RATE};
use ernn_core::evaluation::{rtf_benchmark, MetricReport, UtteranceMetrics};
use ernn_core::model::{count_parameters, format_param_count, load_checkpoint, Architecture, MaskModel};
use ernn_core::numerics::{grad_check, Precision, Real};
use ernn_core::streaming::{enhance as enhance_offline, enhance_streaming};
use ernn_core::synth::{generate_pairs, steady_pair, SynthConfig};
use ernn_core::training::{load_dataset, load_wav, mae_time_loss, train as run_training, write_wav, UtterancePair};
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve_model, resolve_seed, resolve_train, FileConfig, ModelArgs, ModelDefaults, TrainArgs};

/// JSON lines to stdout or to the `--out` file.
pub struct Output {
    path: Option<PathBuf>,
    sink: RefCell<Option<Box<dyn Write>>>,
}

impl Output {
    pub fn new(path: Option<PathBuf>) -> Self {
        Output {
            path,
            sink: RefCell::new(None),
        }
    }

    /// Directory for side files such as CSV traces.
    fn side_dir(&self) -> PathBuf {
        self.path
            .as_deref()
            .and_then(Path::parent)
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn json<S: Serialize>(&self, value: &S) -> Result<()> {
        let mut sink = self.sink.borrow_mut();
        if sink.is_none() {
            *sink = Some(match &self.path {
                Some(p) => Box::new(BufWriter::new(
                    File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )),
                None => Box::new(std::io::stdout()),
            });
        }
        let w = sink.as_mut().expect("opened above");
        serde_json::to_writer(&mut *w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn to_real<T: Real>(x: &[f32]) -> Vec<T> {
    x.iter().map(|&v| T::of(v as f64)).collect()
}

fn to_f32<T: Real>(x: &[T]) -> Vec<f32> {
    x.iter().map(|v| v.as_f64() as f32).collect()
}

pub fn train(args: &TrainArgs, file: &FileConfig, out: &Output) -> Result<ExitCode> {
    let run = resolve_train(args, file)?;
    let pairs = load_dataset(&run.data)?;
    let mut last_err = Ok(());
    let mut on_epoch = |e: &ernn_core::training::EpochReport| {
        if last_err.is_ok() {
            last_err = out.json(e);
        }
    };
    let (report, parameters) = match run.train.precision {
        Precision::F32 => {
            let mut model = MaskModel::<f32>::new(run.model)?;
            (run_training(&pairs, &mut model, &run.train, &mut on_epoch)?, model.num_parameters())
        }
        Precision::F64 => {
            let mut model = MaskModel::<f64>::new(run.model)?;
            (run_training(&pairs, &mut model, &run.train, &mut on_epoch)?, model.num_parameters())
        }
    };
    last_err?;
    out.json(&json!({
        "summary": {
            "pairs": pairs.len(),
            "model": run.model,
            "parameters": parameters,
            "train": run.train,
            "steps": report.steps,
            "final_loss": report.epochs.last().map(|e| e.mean_loss),
            "checkpoints": report.checkpoints,
        }
    }))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Use the frame-by-frame streaming engine.
    #[arg(long)]
    pub stream: bool,
    /// Push size in samples for `--stream`.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
    /// Inference precision (checkpoints are stored in f32).
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
}

fn run_enhance<T: Real>(model: &MaskModel<f32>, x: &[f32], stream: bool, chunk: usize) -> Result<Vec<f32>> {
    let model = model.cast::<T>();
    let x = to_real::<T>(x);
    let y = if stream {
        enhance_streaming(&model, &x, chunk)?
    } else {
        enhance_offline(&model, &Stft::new(StftConfig::default())?, &x)?
    };
    Ok(to_f32(&y))
}

pub fn enhance(args: &EnhanceArgs, out: &Output) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let x = load_wav(&args.input)?;
    let started = Instant::now();
    let y = match args.precision {
        Precision::F32 => run_enhance::<f32>(&ck.model, &x, args.stream, args.chunk)?,
        Precision::F64 => run_enhance::<f64>(&ck.model, &x, args.stream, args.chunk)?,
    };
    let elapsed = started.elapsed().as_secs_f64();
    let clipped = write_wav(&args.output, &y)?;
    let seconds = x.len() as f64 / SAMPLE_RATE as f64;
    out.json(&json!({
        "mode": if args.stream { "stream" } else { "offline" },
        "input": args.input,
        "output": args.output,
        "samples": y.len(),
        "seconds": seconds,
        "processing_seconds": elapsed,
        "rtf": if seconds > 0.0 { elapsed / seconds } else { 0.0 },
        "clipped": clipped,
    }))?;
    Ok(ExitCode::SUCCESS)
}

pub fn params(args: &ModelArgs, file: &FileConfig, out: &Output) -> Result<ExitCode> {
    let cfg = resolve_model(args, file, crate::config::MAIN_MODEL, 0)?;
    let n = count_parameters(&cfg)?;
    let digits = n.to_string();
    let mut grouped = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    out.json(&json!({
        "architecture": cfg.architecture,
        "state_dim": cfg.state_dim,
        "hidden_dim": cfg.hidden_dim,
        "iterations": cfg.iterations,
        "parameters": n,
        "parameters_grouped": grouped,
        "rounded": format_param_count(n),
    }))?;
    Ok(ExitCode::SUCCESS)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Audio length in seconds.
    #[arg(long, default_value_t = 0.05)]
    pub seconds: f64,
    /// Number of probed coordinates.
    #[arg(long, default_value_t = 240)]
    pub probes: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

const TINY_MODEL: ModelDefaults = ModelDefaults {
    arch: Architecture::Ernn,
    ns: 8,
    nh: 4,
    k: 2,
};

pub fn gradcheck(args: &GradcheckArgs, file: &FileConfig, out: &Output) -> Result<ExitCode> {
    let seed = resolve_seed(args.seed, file)?;
    let cfg = resolve_model(&args.model, &FileConfig::default(), TINY_MODEL, seed)?;
    let n = (args.seconds * SAMPLE_RATE as f64).round().max(1.0) as usize;
    let pair = steady_pair(n, 5.0, seed);
    let x = to_real::<f64>(&pair.noisy);
    let s = to_real::<f64>(&pair.clean);
    let model = MaskModel::<f64>::new(cfg)?;
    let stft = Stft::<f64>::new(StftConfig::default())?;
    let mut store = model.store().clone();
    let report = grad_check(
        |g| mae_time_loss(g, &model, &stft, &s, &x),
        &mut store,
        args.probes,
        args.step,
        seed,
    )?;
    // Vanishing gradients everywhere would pass vacuously.
    let nonzero = report.probes.iter().filter(|p| p.analytic != 0.0).count();
    let passed = report.max_rel_err < GRADCHECK_TOLERANCE && 2 * nonzero >= report.probes.len();
    out.json(&json!({
        "model": cfg,
        "samples": x.len(),
        "probes": report.probes.len(),
        "nonzero_probes": nonzero,
        "max_rel_err": report.max_rel_err,
        "worst": report.worst(),
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
    }))?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Benchmark audio length (at least 10 s).
    #[arg(long, default_value_t = 10.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// State dimension of the traced cells.
    #[arg(long, default_value_t = 64)]
    pub trace_ns: usize,
    #[arg(long, default_value_t = 32)]
    pub trace_nh: usize,
    #[arg(long, default_value_t = 3)]
    pub trace_k: usize,
    /// Frames traced after the probed state.
    #[arg(long, default_value_t = 30)]
    pub trace_distance: usize,
    /// Random probes per distance.
    #[arg(long, default_value_t = 8)]
    pub trace_probes: usize,
    /// Spectral norm of the vanilla recurrent matrix.
    #[arg(long, default_value_t = 0.5)]
    pub vanilla_norm: f64,
    /// Directory for the CSV traces (default: next to `--out`, else `.`).
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

const BENCH_MODEL: ModelDefaults = ModelDefaults {
    arch: Architecture::Ernn,
    ns: 256,
    nh: 128,
    k: 1,
};

pub fn bench(args: &BenchArgs, file: &FileConfig, out: &Output) -> Result<ExitCode> {
    let seed = resolve_seed(args.seed, file)?;
    let cfg = resolve_model(&args.model, file, BENCH_MODEL, seed)?;
    let model = MaskModel::<f32>::new(cfg)?;
    let rtf = rtf_benchmark(&model, args.seconds, args.reps)?;

    let traces = gradient_norm_traces(&TraceConfig {
        state_dim: args.trace_ns,
        hidden_dim: args.trace_nh,
        iterations: args.trace_k,
        distance: args.trace_distance,
        probes: args.trace_probes,
        vanilla_norm: args.vanilla_norm,
        seed,
        ..TraceConfig::default()
    })?;
    let dir = args.trace_dir.clone().unwrap_or_else(|| out.side_dir());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    for t in &traces {
        let path = dir.join(format!("norms_{}.csv", t.cell));
        let mut csv = String::from("distance,norm\n");
        for (d, v) in t.norms.iter().enumerate() {
            csv.push_str(&format!("{d},{v:e}\n"));
        }
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        files.push(path);
    }
    out.json(&json!({
        "model": cfg,
        "parameters": model.num_parameters(),
        "rtf": rtf,
        "traces": traces,
        "trace_files": files,
    }))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Use the streaming engine.
    #[arg(long)]
    pub stream: bool,
}

pub fn evaluate(args: &EvaluateArgs, out: &Output) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let pairs = load_dataset(&args.data)?;
    let mut metrics = Vec::with_capacity(pairs.len());
    let mut busy = 0.0;
    let mut samples = 0usize;
    for UtterancePair { id, noisy, clean } in &pairs {
        let started = Instant::now();
        let enhanced = run_enhance::<f32>(&ck.model, noisy, args.stream, 256)?;
        busy += started.elapsed().as_secs_f64();
        samples += noisy.len();
        let m = UtteranceMetrics::compute(id.clone(), clean, noisy, &enhanced)?;
        out.json(&m)?;
        metrics.push(m);
    }
    let mut report = MetricReport::new(metrics);
    report.rtf = Some(busy / (samples as f64 / SAMPLE_RATE as f64));
    let summary = report
        .to_json_lines()
        .lines()
        .last()
        .map(serde_json::from_str::<serde_json::Value>)
        .transpose()?;
    out.json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for `<id>_noisy.wav` / `<id>_clean.wav`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0.0)]
    pub snr_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub snr_max: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn synth(args: &SynthArgs, file: &FileConfig, out: &Output) -> Result<ExitCode> {
    let seed = resolve_seed(args.seed, file)?;
    let pairs = generate_pairs(&SynthConfig {
        pairs: args.pairs,
        seconds: args.seconds,
        snr_db_min: args.snr_min,
        snr_db_max: args.snr_max,
        seed,
        ..SynthConfig::default()
    });
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut clipped = 0;
    for p in &pairs {
        clipped += write_wav(args.out_dir.join(format!("{}_noisy.wav", p.id)), &p.noisy)?;
        clipped += write_wav(args.out_dir.join(format!("{}_clean.wav", p.id)), &p.clean)?;
    }
    out.json(&json!({
        "pairs": pairs.len(),
        "seconds": args.seconds,
        "seed": seed,
        "dir": args.out_dir,
        "clipped": clipped,
    }))?;
    Ok(ExitCode::SUCCESS)
}
