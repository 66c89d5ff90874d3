//! Dataset ingestion, segment sampling, the time-domain MAE loss and the
//! epoch loop.
//!
//! Each epoch shuffles the utterances, draws one aligned random segment per
//! utterance and groups them into mini-batches (the last partial batch is
//! kept). A batch's loss is the mean of its items' losses; its gradient is
//! back-propagated through the full segment and applied with one Adam step.
//! Features are not normalized.

mod loss;
mod wav;

pub use loss::{mae, mae_from_masks, mae_time_loss};
pub use wav::{load_wav, write_wav, write_wav_f32, WavError};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{DspError, Stft, StftConfig, SAMPLE_RATE};
use crate::model::{save_checkpoint, CheckpointError, MaskModel, ModelError};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Graph, NumericsError, Precision, Real};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("pair `{id}`: noisy has {noisy} samples, clean has {clean}")]
    LengthMismatch { id: String, noisy: usize, clean: usize },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

/// Aligned noisy/clean recordings of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePair {
    pub id: String,
    pub noisy: Vec<f32>,
    pub clean: Vec<f32>,
}

impl UtterancePair {
    pub fn new(id: impl Into<String>, noisy: Vec<f32>, clean: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if noisy.len() != clean.len() {
            return Err(TrainingError::LengthMismatch {
                id,
                noisy: noisy.len(),
                clean: clean.len(),
            });
        }
        if noisy.is_empty() {
            return Err(TrainingError::Dataset(format!("pair `{id}` is empty")));
        }
        Ok(UtterancePair { id, noisy, clean })
    }

    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    pub fn load(id: impl Into<String>, noisy: &Path, clean: &Path) -> Result<Self> {
        UtterancePair::new(id, load_wav(noisy)?, load_wav(clean)?)
    }
}

/// Loads pairs from a directory of `<id>_noisy.wav` / `<id>_clean.wav` files
/// or from a manifest of `noisy_path<TAB>clean_path` lines (relative paths
/// resolve against the manifest's directory). Pairs are sorted by id.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<UtterancePair>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(TrainingError::DatasetNotFound(path.to_path_buf()));
    }
    let mut pairs = if path.is_dir() {
        load_directory(path)?
    } else {
        load_manifest(path)?
    };
    if pairs.is_empty() {
        return Err(TrainingError::Dataset(format!("no pairs found in {}", path.display())));
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pairs)
}

fn load_directory(dir: &Path) -> Result<Vec<UtterancePair>> {
    let mut pairs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let noisy = entry?.path();
        let Some(name) = noisy.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(id) = name.strip_suffix("_noisy.wav") else { continue };
        let clean = dir.join(format!("{id}_clean.wav"));
        if !clean.exists() {
            return Err(TrainingError::Dataset(format!(
                "{} has no matching {}",
                noisy.display(),
                clean.display()
            )));
        }
        pairs.push(UtterancePair::load(id, &noisy, &clean)?);
    }
    Ok(pairs)
}

fn load_manifest(file: &Path) -> Result<Vec<UtterancePair>> {
    let base = file.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(file)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (noisy, clean) = line.split_once('\t').ok_or_else(|| {
            TrainingError::Dataset(format!("{}:{}: expected noisy<TAB>clean", file.display(), lineno + 1))
        })?;
        let noisy = base.join(noisy.trim());
        let clean = base.join(clean.trim());
        let id = noisy
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches("_noisy").to_string())
            .unwrap_or_else(|| format!("line{}", lineno + 1));
        pairs.push(UtterancePair::load(id, &noisy, &clean)?);
    }
    Ok(pairs)
}

/// Draws an aligned `len`-sample segment from a uniformly random offset.
/// Shorter utterances are zero-padded at the tail and consume no randomness.
pub fn sample_segment<R: Rng>(pair: &UtterancePair, len: usize, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
    let n = pair.len();
    if n <= len {
        let pad = |x: &[f32]| {
            let mut v = x.to_vec();
            v.resize(len, 0.0);
            v
        };
        return (pad(&pair.noisy), pad(&pair.clean));
    }
    let offset = rng.gen_range(0..=n - len);
    (
        pair.noisy[offset..offset + len].to_vec(),
        pair.clean[offset..offset + len].to_vec(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub segment_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            segment_len: SAMPLE_RATE as usize,
            epochs: 200,
            learning_rate: 1e-4,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 10,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.segment_len == 0 || self.epochs == 0 {
            return Err(TrainingError::Config(
                "batch_size, segment_len and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainingError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Loss and parameter gradients of one segment.
pub fn segment_gradients<T: Real>(
    model: &MaskModel<T>,
    stft: &Stft<T>,
    noisy: &[T],
    clean: &[T],
) -> Result<(f64, Gradients<T>)> {
    let mut g = Graph::new(model.store());
    let loss = mae_time_loss(&mut g, model, stft, clean, noisy)?;
    let value = g.value(loss)[0].as_f64();
    let grads = g.backward(loss)?.into_gradients();
    Ok((value, grads))
}

/// Runs the epoch loop, calling `on_epoch` after each epoch. Items of a
/// batch may be evaluated on the rayon pool; their gradients are summed in
/// batch order, so results do not depend on the thread count.
pub fn train<T: Real>(
    dataset: &[UtterancePair],
    model: &mut MaskModel<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainingError::Dataset("empty dataset".into()));
    }
    let stft = Stft::<T>::new(StftConfig::default())?;
    let mut adam = AdamState::new(
        model.store(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();
    let to_t = |x: Vec<f32>| x.into_iter().map(|v| T::of(v as f64)).collect::<Vec<T>>();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let segments: Vec<(Vec<T>, Vec<T>)> = order
            .iter()
            .map(|&i| {
                let (x, s) = sample_segment(&dataset[i], cfg.segment_len, &mut rng);
                (to_t(x), to_t(s))
            })
            .collect();

        let mut loss_sum = 0.0;
        for (b, batch) in segments.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Gradients<T>)>> = batch
                .par_iter()
                .map(|(x, s)| segment_gradients(model, &stft, x, s))
                .collect();
            let mut total = Gradients::zeros_like(model.store());
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                total.add_assign(&g);
            }
            let batch_loss_mean = batch_loss / batch.len() as f64;
            if !batch_loss_mean.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    loss: batch_loss_mean,
                });
            }
            loss_sum += batch_loss;
            let store = model.store_mut();
            store.zero_grads();
            store.accumulate(&total, T::of(1.0 / batch.len() as f64));
            adam_step(store, &mut adam)?;
            if !store.all_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    loss: f64::NAN,
                });
            }
            report.steps += 1;
        }

        let epoch_report = EpochReport {
            epoch,
            mean_loss: loss_sum / segments.len() as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&epoch_report);
        report.epochs.push(epoch_report);

        if let Some(dir) = &cfg.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if periodic && epoch != cfg.epochs {
                let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
                save_checkpoint(&path, model, Some(&adam))?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(&path, model, Some(&adam))?;
        report.checkpoints.push(path);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{Mask, NUM_BINS};
    use crate::model::ModelConfig;

    fn pair(n: usize) -> UtterancePair {
        let clean: Vec<f32> = (0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        let noisy: Vec<f32> = clean
            .iter()
            .enumerate()
            .map(|(i, &c)| c + ((i * 7919 % 101) as f32 / 101.0 - 0.5) * 0.1)
            .collect();
        UtterancePair::new("p", noisy, clean).unwrap()
    }

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn constant_mask_loss(x: &[f64], s: &[f64], gain: f64) -> f64 {
        let stft = Stft::<f64>::new(StftConfig::default()).unwrap();
        let spec = stft.stft(x).unwrap();
        let store = crate::numerics::ParameterStore::new();
        let mut g = Graph::new(&store);
        let mask = Mask::constant(spec.frames(), NUM_BINS, gain);
        let nodes: Vec<_> = (0..spec.frames())
            .map(|t| g.constant_vector(mask.frame(t).to_vec()))
            .collect();
        let l = mae_from_masks(&mut g, &stft, &spec, &nodes, s).unwrap();
        g.value(l)[0]
    }

    #[test]
    fn unit_mask_on_clean_input_is_near_zero() {
        let s = signal(16000, 1);
        assert!(constant_mask_loss(&s, &s, 1.0) < 1e-9);
    }

    #[test]
    fn zero_mask_gives_mean_magnitude() {
        let s = signal(4000, 2);
        let x = signal(4000, 3);
        let expected = s.iter().map(|v| v.abs()).sum::<f64>() / s.len() as f64;
        assert!((constant_mask_loss(&x, &s, 0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_gives_offset() {
        let s = signal(3000, 4);
        let d = 0.125;
        let shifted: Vec<f64> = s.iter().map(|v| v + d).collect();
        assert!((mae(&s, &shifted) - d).abs() < 1e-12);
        assert_eq!(mae(&s, &s), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let model = MaskModel::<f64>::new(ModelConfig::ernn(4, 2, 1)).unwrap();
        let stft = Stft::<f64>::new(StftConfig::default()).unwrap();
        let mut g = Graph::new(model.store());
        let r = mae_time_loss(&mut g, &model, &stft, &[0.0; 10], &[0.0; 11]);
        assert!(matches!(r, Err(TrainingError::LengthMismatch { .. })));
        assert!(UtterancePair::new("x", vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn segment_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = pair(16000);
        let (x, s) = sample_segment(&p, 16000, &mut rng);
        assert_eq!((x, s), (p.noisy.clone(), p.clean.clone()));

        let short = pair(8000);
        let (x, s) = sample_segment(&short, 16000, &mut rng);
        assert_eq!(&x[..8000], &short.noisy[..]);
        assert_eq!(&s[..8000], &short.clean[..]);
        assert!(x[8000..].iter().chain(&s[8000..]).all(|&v| v == 0.0));

        let long = pair(40000);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let (xa, sa) = sample_segment(&long, 16000, &mut a);
        let (xb, _) = sample_segment(&long, 16000, &mut b);
        assert_eq!(xa, xb);
        let off = long.clean.windows(16000).position(|w| w == &sa[..]).unwrap();
        assert_eq!(&long.noisy[off..off + 16000], &xa[..]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(matches!(
            train::<f32>(&[], &mut MaskModel::new(ModelConfig::ernn(4, 2, 1)).unwrap(), &TrainConfig::default(), |_| {}),
            Err(TrainingError::Dataset(_))
        ));
    }

    #[test]
    fn non_finite_input_aborts_with_location() {
        let mut p = pair(4000);
        p.noisy[100] = f32::NAN;
        let mut model = MaskModel::<f32>::new(ModelConfig::ernn(4, 2, 1)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            segment_len: 4000,
            ..TrainConfig::default()
        };
        match train(&[p], &mut model, &cfg, |_| {}) {
            Err(TrainingError::NonFiniteLoss { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
