//! Objective metrics and real-time-factor benchmarking.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::SAMPLE_RATE;
use crate::model::MaskModel;
use crate::numerics::Real;
use crate::streaming::{StreamError, StreamingEnhancer};

/// Upper bound reported when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 100.0;
pub const SEGMENT_LEN: usize = 256;
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;
const SILENT_FRAME_ENERGY: f64 = 1e-10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("reference has {reference} samples, estimate has {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("benchmark needs at least {min} s of audio, got {got} s")]
    TooShort { min: f64, got: f64 },
    #[error(transparent)]
    Stream(#[from] StreamError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check_lengths<T>(reference: &[T], estimate: &[T]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(EvalError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    Ok(())
}

/// Scale-invariant SDR in dB, capped at +100 dB.
pub fn si_sdr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let ss: f64 = reference.iter().map(|v| v.as_f64().powi(2)).sum();
    if ss <= 0.0 {
        return Err(EvalError::ZeroReference);
    }
    let dot: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| s.as_f64() * e.as_f64())
        .sum();
    let alpha = dot / ss;
    let target = alpha * alpha * ss;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (e.as_f64() - alpha * s.as_f64()).powi(2))
        .sum();
    if residual <= target * 1e-10 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SDR_CAP_DB))
}

/// Mean per-frame SNR over 256-sample frames, each clamped to [−10, 35] dB.
/// Frames whose reference energy is at most 1e-10 are skipped; if every
/// frame is skipped the result is the lower clamp.
pub fn segmental_snr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, e) in reference.chunks(SEGMENT_LEN).zip(estimate.chunks(SEGMENT_LEN)) {
        let signal: f64 = s.iter().map(|v| v.as_f64().powi(2)).sum();
        if signal <= SILENT_FRAME_ENERGY {
            continue;
        }
        let noise: f64 = s
            .iter()
            .zip(e)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let db = if noise == 0.0 {
            SEG_SNR_MAX_DB
        } else {
            10.0 * (signal / noise).log10()
        };
        sum += db.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB);
        count += 1;
    }
    Ok(if count == 0 { SEG_SNR_MIN_DB } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_sdr_noisy_db: f64,
    pub si_sdr_enhanced_db: f64,
    pub si_sdr_improvement_db: f64,
    pub seg_snr_noisy_db: f64,
    pub seg_snr_enhanced_db: f64,
}

impl UtteranceMetrics {
    pub fn compute<T: Real>(id: impl Into<String>, clean: &[T], noisy: &[T], enhanced: &[T]) -> Result<Self> {
        let si_noisy = si_sdr(clean, noisy)?;
        let si_enh = si_sdr(clean, enhanced)?;
        Ok(UtteranceMetrics {
            id: id.into(),
            si_sdr_noisy_db: si_noisy,
            si_sdr_enhanced_db: si_enh,
            si_sdr_improvement_db: si_enh - si_noisy,
            seg_snr_noisy_db: segmental_snr(clean, noisy)?,
            seg_snr_enhanced_db: segmental_snr(clean, enhanced)?,
        })
    }
}

/// Per-utterance metrics plus their means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub mean_si_sdr_noisy_db: f64,
    pub mean_si_sdr_enhanced_db: f64,
    pub mean_si_sdr_improvement_db: f64,
    pub mean_seg_snr_noisy_db: f64,
    pub mean_seg_snr_enhanced_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf: Option<f64>,
}

impl MetricReport {
    pub fn new(utterances: Vec<UtteranceMetrics>) -> Self {
        let n = utterances.len().max(1) as f64;
        let mean = |f: fn(&UtteranceMetrics) -> f64| utterances.iter().map(f).sum::<f64>() / n;
        MetricReport {
            mean_si_sdr_noisy_db: mean(|u| u.si_sdr_noisy_db),
            mean_si_sdr_enhanced_db: mean(|u| u.si_sdr_enhanced_db),
            mean_si_sdr_improvement_db: mean(|u| u.si_sdr_improvement_db),
            mean_seg_snr_noisy_db: mean(|u| u.seg_snr_noisy_db),
            mean_seg_snr_enhanced_db: mean(|u| u.seg_snr_enhanced_db),
            rtf: None,
            utterances,
        }
    }

    /// One JSON object per utterance followed by a summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u).expect("plain data"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "utterances": self.utterances.len(),
                "mean_si_sdr_noisy_db": self.mean_si_sdr_noisy_db,
                "mean_si_sdr_enhanced_db": self.mean_si_sdr_enhanced_db,
                "mean_si_sdr_improvement_db": self.mean_si_sdr_improvement_db,
                "mean_seg_snr_noisy_db": self.mean_seg_snr_noisy_db,
                "mean_seg_snr_enhanced_db": self.mean_seg_snr_enhanced_db,
                "rtf": self.rtf,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_seconds: f64,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub rtf: f64,
    pub frame_latency_us_p50: f64,
    pub frame_latency_us_p90: f64,
    pub frame_latency_us_p99: f64,
    pub frame_latency_us_max: f64,
}

/// Minimum benchmark length in seconds.
pub const MIN_BENCH_SECONDS: f64 = 10.0;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Streams `seconds` of seeded white noise through the model in hop-sized
/// chunks on the calling thread. RTF is the median wall time over
/// `repetitions` divided by the audio duration; latencies are per push.
pub fn rtf_benchmark<T: Real>(model: &MaskModel<T>, seconds: f64, repetitions: usize) -> Result<RtfReport> {
    if !(seconds >= MIN_BENCH_SECONDS) {
        return Err(EvalError::TooShort {
            min: MIN_BENCH_SECONDS,
            got: seconds,
        });
    }
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let audio: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-0.3..0.3))).collect();
    let reps = repetitions.max(1);
    let mut totals = Vec::with_capacity(reps);
    let mut latencies = Vec::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..reps {
        let mut stream = StreamingEnhancer::new(model)?;
        out.clear();
        let started = Instant::now();
        for chunk in audio.chunks(crate::dsp::HOP) {
            let t = Instant::now();
            stream.push_into(chunk, &mut out)?;
            latencies.push(t.elapsed().as_secs_f64() * 1e6);
        }
        out.extend(stream.flush()?);
        totals.push(started.elapsed().as_secs_f64());
        std::hint::black_box(&out);
    }
    totals.sort_by(f64::total_cmp);
    latencies.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        totals[reps / 2]
    } else {
        0.5 * (totals[reps / 2 - 1] + totals[reps / 2])
    };
    let duration = n as f64 / SAMPLE_RATE as f64;
    Ok(RtfReport {
        audio_seconds: duration,
        repetitions: reps,
        median_seconds: median,
        rtf: median / duration,
        frame_latency_us_p50: percentile(&latencies, 0.5),
        frame_latency_us_p90: percentile(&latencies, 0.9),
        frame_latency_us_p99: percentile(&latencies, 0.99),
        frame_latency_us_max: latencies.last().copied().unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tone(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.011).cos()).collect()
    }

    /// `n` with its projection onto `s` removed, scaled so ‖n‖² = ratio·‖s‖².
    fn orthogonal_noise(s: &[f64], ratio: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n: Vec<f64> = s.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let a = n.iter().zip(s).map(|(x, y)| x * y).sum::<f64>() / ss;
        for (x, y) in n.iter_mut().zip(s) {
            *x -= a * y;
        }
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let k = (ratio * ss / nn).sqrt();
        n.iter().map(|v| v * k).collect()
    }

    #[test]
    fn si_sdr_examples() {
        let s = tone(4000);
        assert_eq!(si_sdr(&s, &s).unwrap(), 100.0);
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&s, &doubled).unwrap(), 100.0);
        let n = orthogonal_noise(&s, 0.1, 1);
        let x: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!((si_sdr(&s, &x).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(si_sdr(&[0.0; 4], &[1.0; 4]), Err(EvalError::ZeroReference));
        assert!(matches!(si_sdr(&s, &s[1..]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn seg_snr_examples() {
        let s = tone(2560);
        assert_eq!(segmental_snr(&s, &s).unwrap(), 35.0);
        // A silent estimate leaves residual = reference: 0 dB per frame.
        assert_eq!(segmental_snr(&s, &vec![0.0; s.len()]).unwrap(), 0.0);
        let inverted: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(segmental_snr(&s, &inverted).unwrap(), -10.0 * 4f64.log10());
        let far: Vec<f64> = s.iter().map(|v| -9.0 * v).collect();
        assert_eq!(segmental_snr(&s, &far).unwrap(), -10.0);
        // One frame with ‖s‖²/‖s − ŝ‖² = 100.
        let frame = vec![1.0; 256];
        let est: Vec<f64> = frame.iter().map(|v| v - 0.1).collect();
        assert!((segmental_snr(&frame, &est).unwrap() - 20.0).abs() < 1e-12);
        // Silent frames are skipped.
        let mut padded = vec![0.0; 256];
        padded.extend(&frame);
        let mut padded_est = vec![0.5; 256];
        padded_est.extend(&est);
        assert!((segmental_snr(&padded, &padded_est).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn report_means_and_lines() {
        let s = tone(1000);
        let x: Vec<f64> = s.iter().zip(orthogonal_noise(&s, 1.0, 3)).map(|(a, b)| a + b).collect();
        let a = UtteranceMetrics::compute("a", &s, &x, &s).unwrap();
        let b = UtteranceMetrics::compute("b", &s, &x, &x).unwrap();
        let r = MetricReport::new(vec![a.clone(), b]);
        assert!((a.si_sdr_noisy_db).abs() < 1e-9);
        assert!((r.mean_si_sdr_improvement_db - 50.0).abs() < 1e-9);
        let lines: Vec<serde_json::Value> = r
            .to_json_lines()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["id"], "a");
        assert!(lines[2]["summary"]["utterances"] == 2);
    }

    #[test]
    fn benchmark_rejects_short_audio() {
        let m = MaskModel::<f32>::new(crate::model::ModelConfig::ernn(4, 2, 1)).unwrap();
        assert!(matches!(rtf_benchmark(&m, 1.0, 1), Err(EvalError::TooShort { .. })));
    }

    proptest! {
        #[test]
        fn si_sdr_is_scale_invariant(beta in 1e-3f64..1e3, seed in 0u64..50) {
            let s = tone(1000);
            let x: Vec<f64> = s.iter().zip(orthogonal_noise(&s, 0.3, seed)).map(|(a, b)| a + b).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * beta).collect();
            let a = si_sdr(&s, &x).unwrap();
            prop_assert!((a - si_sdr(&s, &scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn si_sdr_falls_with_noise(r1 in 0.01f64..10.0, factor in 1.01f64..10.0, seed in 0u64..50) {
            let s = tone(1000);
            let n = orthogonal_noise(&s, 1.0, seed);
            let mix = |r: f64| -> Vec<f64> { s.iter().zip(&n).map(|(a, b)| a + r.sqrt() * b).collect() };
            prop_assert!(si_sdr(&s, &mix(r1)).unwrap() > si_sdr(&s, &mix(r1 * factor)).unwrap());
        }

        #[test]
        fn seg_snr_is_bounded(seed in 0u64..100, scale in 0.0f64..5.0) {
            let s = tone(1300);
            let e: Vec<f64> = s.iter().zip(orthogonal_noise(&s, 1.0, seed)).map(|(a, b)| a + scale * b).collect();
            let v = segmental_snr(&s, &e).unwrap();
            prop_assert!((SEG_SNR_MIN_DB..=SEG_SNR_MAX_DB).contains(&v));
        }
    }
}
