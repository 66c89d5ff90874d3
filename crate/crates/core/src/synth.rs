//! Synthetic noisy/clean pairs for desk-scale experiments.
//!
//! The clean signal is a tonal surrogate for voiced speech: a harmonic
//! series on a slowly gliding fundamental, gated by syllable-rate envelopes
//! with short pauses. Noise is white, pink or brown Gaussian noise scaled to
//! a target SNR.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::SAMPLE_RATE;
use crate::training::UtterancePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub pairs: usize,
    pub seconds: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub noise: Vec<NoiseKind>,
    /// RMS of the clean signal.
    pub level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pairs: 50,
            seconds: 2.0,
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            noise: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown],
            level: 0.1,
            seed: 0,
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Harmonic surrogate speech of `n` samples with RMS `level`.
pub fn tonal_speech<R: Rng>(n: usize, level: f64, rng: &mut R) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let f0_base = rng.gen_range(90.0..260.0);
    let glide_rate = rng.gen_range(0.5..2.0);
    let glide_depth = rng.gen_range(0.05..0.2);
    let harmonics = ((3800.0 / f0_base) as usize).clamp(4, 30);
    let tilt = rng.gen_range(0.6..1.2);
    let formant = rng.gen_range(400.0..1200.0);

    let mut envelope = vec![0.0; n];
    let mut t = rng.gen_range(0..(fs * 0.1) as usize);
    while t < n {
        let syllable = (rng.gen_range(0.12..0.3) * fs) as usize;
        let pause = (rng.gen_range(0.03..0.15) * fs) as usize;
        let gain = rng.gen_range(0.5..1.0);
        for i in 0..syllable.min(n - t) {
            envelope[t + i] = gain * (PI * i as f64 / syllable as f64).sin().powi(2);
        }
        t += syllable + pause;
    }

    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for (i, env) in envelope.iter().enumerate() {
        let time = i as f64 / fs;
        let f0 = f0_base * (1.0 + glide_depth * (2.0 * PI * glide_rate * time).sin());
        phase += 2.0 * PI * f0 / fs;
        let mut v = 0.0;
        for h in 1..=harmonics {
            let f = h as f64 * f0;
            let resonance = 1.0 + 2.0 * (-(f - formant).powi(2) / (2.0 * 300.0f64.powi(2))).exp();
            v += resonance * (h as f64).powf(-tilt) * (h as f64 * phase).sin();
        }
        out.push(env * v);
    }
    let r = rms(&out);
    if r > 0.0 {
        for v in &mut out {
            *v *= level / r;
        }
    }
    out
}

/// Unit-variance noise of the given colour.
pub fn colored_noise<R: Rng>(n: usize, kind: NoiseKind, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            white
                .iter()
                .map(|&w| {
                    acc = 0.98 * acc + w;
                    acc
                })
                .collect()
        }
    };
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    for v in &mut out {
        *v -= mean;
    }
    let r = rms(&out);
    if r > 0.0 {
        for v in &mut out {
            *v /= r;
        }
    }
    out
}

/// `clean + noise` with the noise scaled so that the mixture has `snr_db`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Vec<f64> {
    let gain = rms(clean) / rms(noise).max(1e-300) / 10f64.powf(snr_db / 20.0);
    clean.iter().zip(noise).map(|(s, n)| s + gain * n).collect()
}

/// A steady harmonic tone (no pauses) in white noise at `snr_db`. Short
/// excerpts of [`tonal_speech`] can fall entirely inside a pause; this pair
/// never does.
pub fn steady_pair(n: usize, snr_db: f64, seed: u64) -> UtterancePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.gen_range(120.0..220.0);
    let fs = SAMPLE_RATE as f64;
    let mut clean: Vec<f64> = (0..n)
        .map(|i| {
            let ph = 2.0 * PI * f0 * i as f64 / fs;
            (1..=8).map(|h| (h as f64 * ph).sin() / h as f64).sum()
        })
        .collect();
    let r = rms(&clean);
    for v in &mut clean {
        *v *= 0.1 / r;
    }
    let noise = colored_noise(n, NoiseKind::White, &mut rng);
    let noisy = mix_at_snr(&clean, &noise, snr_db);
    UtterancePair::new(
        format!("steady{seed}"),
        noisy.iter().map(|&v| v as f32).collect(),
        clean.iter().map(|&v| v as f32).collect(),
    )
    .expect("equal non-empty lengths")
}

/// Generates `cfg.pairs` pairs named `syn0000`, `syn0001`, …; pair `i`
/// depends only on `(cfg.seed, i)`.
pub fn generate_pairs(cfg: &SynthConfig) -> Vec<UtterancePair> {
    let n = (cfg.seconds * SAMPLE_RATE as f64).round().max(1.0) as usize;
    (0..cfg.pairs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let clean = tonal_speech(n, cfg.level, &mut rng);
            let kind = if cfg.noise.is_empty() {
                NoiseKind::White
            } else {
                cfg.noise[rng.gen_range(0..cfg.noise.len())]
            };
            let noise = colored_noise(n, kind, &mut rng);
            let snr = if cfg.snr_db_max > cfg.snr_db_min {
                rng.gen_range(cfg.snr_db_min..=cfg.snr_db_max)
            } else {
                cfg.snr_db_min
            };
            let noisy = mix_at_snr(&clean, &noise, snr);
            UtterancePair::new(
                format!("syn{i:04}"),
                noisy.iter().map(|&v| v as f32).collect(),
                clean.iter().map(|&v| v as f32).collect(),
            )
            .expect("equal non-empty lengths")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
        let noise: Vec<f64> = noisy.iter().zip(clean).map(|(x, s)| x - s).collect();
        20.0 * (rms(clean) / rms(&noise)).log10()
    }

    #[test]
    fn mixing_hits_target_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = tonal_speech(16000, 0.1, &mut rng);
        assert!((rms(&s) - 0.1).abs() < 1e-12);
        for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown] {
            let n = colored_noise(16000, kind, &mut rng);
            assert!((rms(&n) - 1.0).abs() < 1e-12);
            for snr in [0.0, 4.5, 10.0] {
                assert!((snr_db(&s, &mix_at_snr(&s, &n, snr)) - snr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pairs_are_seeded_and_in_range() {
        let cfg = SynthConfig {
            pairs: 6,
            seconds: 0.5,
            ..SynthConfig::default()
        };
        let a = generate_pairs(&cfg);
        assert_eq!(a, generate_pairs(&cfg));
        assert_eq!(a.len(), 6);
        for p in &a {
            assert_eq!(p.len(), 8000);
            let s: Vec<f64> = p.clean.iter().map(|&v| v as f64).collect();
            let x: Vec<f64> = p.noisy.iter().map(|&v| v as f64).collect();
            let snr = snr_db(&s, &x);
            assert!((-0.01..=10.01).contains(&snr), "{snr}");
        }
        let other = generate_pairs(&SynthConfig { seed: 1, ..cfg });
        assert_ne!(a[0], other[0]);
    }

    #[test]
    fn steady_pair_is_never_silent() {
        let p = steady_pair(800, 5.0, 3);
        let s: Vec<f64> = p.clean.iter().map(|&v| v as f64).collect();
        let x: Vec<f64> = p.noisy.iter().map(|&v| v as f64).collect();
        assert!((rms(&s) - 0.1).abs() < 1e-6);
        assert!((snr_db(&s, &x) - 5.0).abs() < 1e-4);
    }

    #[test]
    fn surrogate_has_pauses_and_harmonics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = tonal_speech(32000, 0.1, &mut rng);
        let silent = s.iter().filter(|v| v.abs() < 1e-9).count();
        assert!(silent > 1000);
        assert!(s.iter().all(|v| v.is_finite()));
    }
}
