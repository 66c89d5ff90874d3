//! STFT analysis and canonical-dual synthesis, log-magnitude features and
//! mask application.
//!
//! Framing convention: the signal is preceded by `window − hop` zeros and
//! followed by zeros up to the end of the last frame. Frame `τ` therefore
//! covers input samples `[τ·hop − (window − hop), τ·hop + hop)` and every
//! input sample lies under exactly `window / hop` frames. With the
//! 512/256 configuration a signal of `L ≥ 1` samples yields
//! `⌊(L − 1)/256⌋ + 2` frames. The offline and streaming paths share this
//! convention sample for sample.

use std::sync::Arc;

use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_LEN: usize = 512;
pub const HOP: usize = 256;
pub const FFT_LEN: usize = 512;
/// One-sided bin count Ω.
pub const NUM_BINS: usize = FFT_LEN / 2 + 1;
/// Floor applied to |X| before the logarithm.
pub const MAGNITUDE_FLOOR: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DspError {
    #[error("input signal is empty")]
    EmptyInput,
    #[error("window is not invertible at hop {hop}: no energy at phase {index}")]
    NotInvertible { index: usize, hop: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("requested {requested} samples but the spectrogram only synthesizes {max}")]
    LengthTooLong { requested: usize, max: usize },
    #[error("invalid STFT configuration: {0}")]
    Config(String),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: WINDOW_LEN,
            hop: HOP,
            fft_len: FFT_LEN,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Zeros implicitly prepended to the signal.
    pub fn head_padding(&self) -> usize {
        self.window_len - self.hop
    }

    /// Frames needed so every sample of an `len`-sample signal is under all
    /// of its overlapping windows.
    pub fn num_frames(&self, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        (len - 1) / self.hop + self.window_len / self.hop
    }

    /// Samples fully reconstructed by `frames` frames.
    pub fn synthesizable_len(&self, frames: usize) -> usize {
        let overlap = self.window_len / self.hop;
        (frames + 1).saturating_sub(overlap) * self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_len == 0 {
            return Err(DspError::Config("window and hop must be positive".into()));
        }
        if !self.window_len.is_multiple_of(self.hop) {
            return Err(DspError::Config(format!(
                "hop {} does not divide window {}",
                self.hop, self.window_len
            )));
        }
        if self.fft_len != self.window_len || !self.fft_len.is_multiple_of(2) {
            return Err(DspError::Config(format!(
                "FFT length {} must equal the (even) window length {}",
                self.fft_len, self.window_len
            )));
        }
        Ok(())
    }
}

/// Periodic Hann window `0.5(1 − cos(2πn/N))`.
pub fn hann_window<T: Real>(n: usize) -> Result<Vec<T>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(DspError::Config(format!("Hann length {n} must be even")));
    }
    Ok((0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            T::of(0.5 * (1.0 - phase.cos()))
        })
        .collect())
}

/// `w_d[n] = w[n] / Σ_k w[n + k·hop]²` with the sum over all shifts that
/// stay inside the window.
pub fn canonical_dual_window<T: Real>(w: &[T], hop: usize) -> Result<Vec<T>> {
    if hop == 0 || !w.len().is_multiple_of(hop) {
        return Err(DspError::Config(format!(
            "hop {hop} does not divide window {}",
            w.len()
        )));
    }
    let mut energy = vec![0.0f64; hop];
    for (n, &v) in w.iter().enumerate() {
        energy[n % hop] += v.as_f64() * v.as_f64();
    }
    w.iter()
        .enumerate()
        .map(|(n, &v)| {
            let e = energy[n % hop];
            if e <= 0.0 {
                Err(DspError::NotInvertible { index: n % hop, hop })
            } else {
                Ok(T::of(v.as_f64() / e))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair<T> {
    pub analysis: Vec<T>,
    pub synthesis: Vec<T>,
}

impl<T: Real> WindowPair<T> {
    pub fn hann(cfg: &StftConfig) -> Result<Self> {
        let analysis = hann_window(cfg.window_len)?;
        let synthesis = canonical_dual_window(&analysis, cfg.hop)?;
        Ok(WindowPair {
            analysis,
            synthesis,
        })
    }
}

/// Complex T-F array, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    frames: usize,
    bins: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> Spectrogram<T> {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Spectrogram {
            frames,
            bins,
            data: vec![Complex::new(T::zero(), T::zero()); frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex<T>] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn add(&self, other: &Spectrogram<T>) -> Result<Spectrogram<T>> {
        self.check_shape(other.frames, other.bins)?;
        Ok(Spectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    fn check_shape(&self, frames: usize, bins: usize) -> Result<()> {
        if (frames, bins) != (self.frames, self.bins) {
            return Err(DspError::Shape {
                expected: (self.frames, self.bins),
                found: (frames, bins),
            });
        }
        Ok(())
    }
}

/// Real gain per T-F bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask<T> {
    frames: usize,
    bins: usize,
    data: Vec<T>,
}

impl<T: Real> Mask<T> {
    pub fn new(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(DspError::Shape {
                expected: (frames, bins),
                found: (data.len() / bins.max(1), bins),
            });
        }
        Ok(Mask { frames, bins, data })
    }

    pub fn constant(frames: usize, bins: usize, value: T) -> Self {
        Mask {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Planned transforms plus the window pair for one configuration.
#[derive(Clone)]
pub struct Stft<T: Real> {
    cfg: StftConfig,
    windows: WindowPair<T>,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Real> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl<T: Real> Stft<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let windows = WindowPair::hann(&cfg)?;
        Self::with_windows(cfg, windows)
    }

    pub fn with_windows(cfg: StftConfig, windows: WindowPair<T>) -> Result<Self> {
        cfg.validate()?;
        if windows.analysis.len() != cfg.window_len || windows.synthesis.len() != cfg.window_len {
            return Err(DspError::Config("window length does not match config".into()));
        }
        let mut planner = RealFftPlanner::<T>::new();
        Ok(Stft {
            cfg,
            windows,
            forward: planner.plan_fft_forward(cfg.fft_len),
            inverse: planner.plan_fft_inverse(cfg.fft_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn windows(&self) -> &WindowPair<T> {
        &self.windows
    }

    /// Unnormalized one-sided DFT of a real frame (no window applied).
    /// `frame` is used as scratch.
    pub fn dft(&self, frame: &mut [T], out: &mut [Complex<T>]) {
        self.forward
            .process(frame, out)
            .expect("buffer sizes fixed by config");
    }

    /// Windows `frame` in place and transforms it.
    pub fn analyze_frame(&self, frame: &mut [T], out: &mut [Complex<T>]) {
        for (x, &w) in frame.iter_mut().zip(&self.windows.analysis) {
            *x = *x * w;
        }
        self.dft(frame, out);
    }

    /// Inverse transform of one frame, scaled by `1/N` and multiplied by the
    /// synthesis window. `spec` is used as scratch.
    pub fn synthesize_frame(&self, spec: &mut [Complex<T>], out: &mut [T]) {
        let last = spec.len() - 1;
        spec[0].im = T::zero();
        spec[last].im = T::zero();
        self.inverse
            .process(spec, out)
            .expect("buffer sizes fixed by config");
        let scale = T::one() / T::of(self.cfg.fft_len as f64);
        for (y, &wd) in out.iter_mut().zip(&self.windows.synthesis) {
            *y = *y * scale * wd;
        }
    }

    /// Input sample index at which frame `t` begins (negative inside the
    /// head padding).
    pub fn frame_start(&self, t: usize) -> isize {
        (t * self.cfg.hop) as isize - self.cfg.head_padding() as isize
    }

    pub fn stft(&self, x: &[T]) -> Result<Spectrogram<T>> {
        if x.is_empty() {
            return Err(DspError::EmptyInput);
        }
        let frames = self.cfg.num_frames(x.len());
        let bins = self.cfg.bins();
        let mut spec = Spectrogram::zeros(frames, bins);
        let mut buf = vec![T::zero(); self.cfg.window_len];
        for t in 0..frames {
            let start = self.frame_start(t);
            for (n, b) in buf.iter_mut().enumerate() {
                let i = start + n as isize;
                *b = if i >= 0 && (i as usize) < x.len() {
                    x[i as usize]
                } else {
                    T::zero()
                };
            }
            self.analyze_frame(&mut buf, spec.frame_mut(t));
        }
        Ok(spec)
    }

    pub fn istft(&self, spec: &Spectrogram<T>, len: usize) -> Result<Vec<T>> {
        if spec.bins() != self.cfg.bins() {
            return Err(DspError::Shape {
                expected: (spec.frames(), self.cfg.bins()),
                found: (spec.frames(), spec.bins()),
            });
        }
        let max = self.cfg.synthesizable_len(spec.frames());
        if len > max {
            return Err(DspError::LengthTooLong { requested: len, max });
        }
        let mut out = vec![T::zero(); len];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.cfg.bins()];
        let mut frame = vec![T::zero(); self.cfg.window_len];
        for t in 0..spec.frames() {
            let start = self.frame_start(t);
            if start >= len as isize {
                break;
            }
            scratch.copy_from_slice(spec.frame(t));
            self.synthesize_frame(&mut scratch, &mut frame);
            for (n, &y) in frame.iter().enumerate() {
                let i = start + n as isize;
                if i >= 0 && (i as usize) < len {
                    out[i as usize] = out[i as usize] + y;
                }
            }
        }
        Ok(out)
    }
}

/// `ln(max(|X|, 1e-7))` per bin of one frame.
pub fn log_magnitude_frame<T: Real>(frame: &[Complex<T>], out: &mut [T]) {
    let floor = T::of(MAGNITUDE_FLOOR);
    for (o, c) in out.iter_mut().zip(frame) {
        *o = c.norm().max(floor).ln();
    }
}

/// Feature sequence of shape `[frames, bins]`.
pub fn log_magnitude<T: Real>(spec: &Spectrogram<T>) -> Tensor<T> {
    let mut data = vec![T::zero(); spec.frames() * spec.bins()];
    for (t, out) in data.chunks_exact_mut(spec.bins()).enumerate() {
        log_magnitude_frame(spec.frame(t), out);
    }
    Tensor::new(vec![spec.frames(), spec.bins()], data).expect("frames ≥ 1")
}

pub fn apply_mask<T: Real>(spec: &Spectrogram<T>, mask: &Mask<T>) -> Result<Spectrogram<T>> {
    spec.check_shape(mask.frames(), mask.bins())?;
    Ok(Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        data: spec
            .data
            .iter()
            .zip(mask.data())
            .map(|(&x, &g)| x * g)
            .collect(),
    })
}

/// `‖a − b‖₂ / ‖a‖₂`.
pub fn relative_error<T: Real>(reference: &[T], estimate: &[T]) -> f64 {
    let num: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    let den: f64 = reference.iter().map(|&a| a.as_f64().powi(2)).sum();
    (num / den).sqrt()
}
