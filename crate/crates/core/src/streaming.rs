//! Frame-by-frame causal enhancement.
//!
//! [`StreamingEnhancer`] accepts input in chunks of any size. Every 256 new
//! samples complete a 512-sample window and trigger one frame: window, FFT,
//! log-magnitude, one recurrent step, mask, inverse FFT, dual window and
//! overlap-add. After frame `p ≥ 1` the output samples `[256(p−1), 256p)` are
//! final and are returned, so the first output appears when input sample
//! 512 arrives and output sample `t` never depends on input past `t + 511`.
//!
//! [`enhance`] is the offline path. Both run the same per-frame kernels in
//! the same order, so their outputs agree sample for sample.

use num_complex::Complex;

use crate::dsp::{apply_mask, log_magnitude, log_magnitude_frame, DspError, Stft, StftConfig};
use crate::model::{MaskModel, ModelError, RecurrentState};
use crate::numerics::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StreamError {
    #[error("stream is closed")]
    Closed,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T, E = StreamError> = std::result::Result<T, E>;

/// Offline enhancement: STFT, masks for the whole sequence, masked iSTFT.
/// The output has the input's length; empty input gives empty output.
pub fn enhance<T: Real>(model: &MaskModel<T>, stft: &Stft<T>, noisy: &[T]) -> Result<Vec<T>> {
    if noisy.is_empty() {
        return Ok(Vec::new());
    }
    let spec = stft.stft(noisy)?;
    let mask = model.forward_sequence(&log_magnitude(&spec))?;
    let masked = apply_mask(&spec, &mask)?;
    Ok(stft.istft(&masked, noisy.len())?)
}

/// Per-stream state: input window, overlap-add accumulator, recurrent state.
pub struct StreamingEnhancer<'m, T: Real> {
    model: &'m MaskModel<T>,
    stft: Stft<T>,
    state: RecurrentState<T>,
    window: Vec<T>,
    filled: usize,
    ola: Vec<T>,
    frames: usize,
    samples_in: usize,
    samples_out: usize,
    closed: bool,
    frame_buf: Vec<T>,
    spec: Vec<Complex<T>>,
    features: Vec<T>,
    synth: Vec<T>,
}

impl<'m, T: Real> std::fmt::Debug for StreamingEnhancer<'m, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamingEnhancer")
            .field("frames", &self.frames)
            .field("samples_in", &self.samples_in)
            .field("samples_out", &self.samples_out)
            .field("closed", &self.closed)
            .finish()
    }
}

impl<'m, T: Real> StreamingEnhancer<'m, T> {
    pub fn new(model: &'m MaskModel<T>) -> Result<Self> {
        Self::with_stft(model, Stft::new(StftConfig::default())?)
    }

    pub fn with_stft(model: &'m MaskModel<T>, stft: Stft<T>) -> Result<Self> {
        let cfg = *stft.config();
        let bins = cfg.bins();
        if bins != model.config().feature_dim {
            return Err(ModelError::FeatureDim {
                expected: model.config().feature_dim,
                found: bins,
            }
            .into());
        }
        Ok(StreamingEnhancer {
            model,
            state: model.initial_state(),
            window: vec![T::zero(); cfg.window_len],
            filled: cfg.head_padding(),
            ola: vec![T::zero(); cfg.window_len],
            frames: 0,
            samples_in: 0,
            samples_out: 0,
            closed: false,
            frame_buf: vec![T::zero(); cfg.window_len],
            spec: vec![Complex::new(T::zero(), T::zero()); bins],
            features: vec![T::zero(); bins],
            synth: vec![T::zero(); cfg.window_len],
            stft,
        })
    }

    /// Algorithmic latency in samples.
    pub fn latency(&self) -> usize {
        self.stft.config().window_len
    }

    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    pub fn samples_in(&self) -> usize {
        self.samples_in
    }

    pub fn samples_out(&self) -> usize {
        self.samples_out
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Buffers `samples` and returns every output sample that became final.
    pub fn push(&mut self, samples: &[T]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(samples.len() + self.stft.config().hop);
        self.push_into(samples, &mut out)?;
        Ok(out)
    }

    /// Like [`push`](Self::push) but appends to `out`.
    pub fn push_into(&mut self, mut samples: &[T], out: &mut Vec<T>) -> Result<()> {
        if self.closed {
            return Err(StreamError::Closed);
        }
        let len = self.window.len();
        while !samples.is_empty() {
            let take = (len - self.filled).min(samples.len());
            self.window[self.filled..self.filled + take].copy_from_slice(&samples[..take]);
            self.filled += take;
            self.samples_in += take;
            samples = &samples[take..];
            if self.filled == len {
                self.process_frame(out)?;
            }
        }
        Ok(())
    }

    /// Zero-pads the tail like the offline STFT, returns the remaining
    /// output (total output length equals total input length) and closes
    /// the stream.
    pub fn flush(&mut self) -> Result<Vec<T>> {
        if self.closed {
            return Err(StreamError::Closed);
        }
        self.closed = true;
        let mut out = Vec::new();
        if self.samples_in == 0 {
            return Ok(out);
        }
        let total = self.stft.config().num_frames(self.samples_in);
        while self.frames < total {
            self.window[self.filled..].fill(T::zero());
            self.filled = self.window.len();
            self.process_frame(&mut out)?;
        }
        out.truncate(self.samples_in - (self.samples_out - out.len()));
        self.samples_out = self.samples_in;
        Ok(out)
    }

    fn process_frame(&mut self, out: &mut Vec<T>) -> Result<()> {
        let hop = self.stft.config().hop;
        self.frame_buf.copy_from_slice(&self.window);
        self.stft.analyze_frame(&mut self.frame_buf, &mut self.spec);
        log_magnitude_frame(&self.spec, &mut self.features);
        let gains = self.model.step(&self.features, &mut self.state)?;
        for (x, &g) in self.spec.iter_mut().zip(&gains) {
            *x = *x * g;
        }
        self.stft.synthesize_frame(&mut self.spec, &mut self.synth);
        for (acc, &y) in self.ola.iter_mut().zip(&self.synth) {
            *acc = *acc + y;
        }
        if self.frames > 0 {
            out.extend_from_slice(&self.ola[..hop]);
            self.samples_out += hop;
        }
        self.ola.copy_within(hop.., 0);
        let tail = self.ola.len() - hop;
        self.ola[tail..].fill(T::zero());
        self.window.copy_within(hop.., 0);
        self.filled -= hop;
        self.frames += 1;
        Ok(())
    }
}

/// Runs a whole signal through a fresh stream in chunks of `chunk` samples.
pub fn enhance_streaming<T: Real>(model: &MaskModel<T>, noisy: &[T], chunk: usize) -> Result<Vec<T>> {
    let mut stream = StreamingEnhancer::new(model)?;
    let mut out = Vec::with_capacity(noisy.len());
    for c in noisy.chunks(chunk.max(1)) {
        stream.push_into(c, &mut out)?;
    }
    out.extend(stream.flush()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> MaskModel<f32> {
        MaskModel::new(ModelConfig::ernn(16, 8, 2).with_seed(3)).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn zeros_in_zeros_out() {
        let m = model();
        let mut s = StreamingEnhancer::new(&m).unwrap();
        let mut out = s.push(&vec![0.0; 16000]).unwrap();
        out.extend(s.flush().unwrap());
        assert_eq!(out.len(), 16000);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_output_after_one_window() {
        let m = model();
        let mut s = StreamingEnhancer::new(&m).unwrap();
        let x = noise(600, 1);
        assert!(s.push(&x[..511]).unwrap().is_empty());
        assert_eq!(s.push(&x[511..512]).unwrap().len(), 256);
        assert_eq!(s.latency(), 512);
    }

    #[test]
    fn flush_rules() {
        let m = model();
        let mut s = StreamingEnhancer::new(&m).unwrap();
        assert!(s.flush().unwrap().is_empty());
        assert_eq!(s.flush(), Err(StreamError::Closed));
        assert_eq!(s.push(&[0.0]), Err(StreamError::Closed));

        let mut s = StreamingEnhancer::new(&m).unwrap();
        assert!(s.push(&noise(100, 2)).unwrap().is_empty());
        assert_eq!(s.flush().unwrap().len(), 100);
    }

    #[test]
    fn lstm_streaming_matches_offline() {
        let m = MaskModel::<f64>::new(ModelConfig::lstm2(8).with_seed(5)).unwrap();
        let stft = Stft::new(StftConfig::default()).unwrap();
        let x: Vec<f64> = noise(3000, 4).into_iter().map(f64::from).collect();
        assert_eq!(enhance(&m, &stft, &x).unwrap(), enhance_streaming(&m, &x, 77).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn length_and_parity(len in 1usize..2000, chunk in 1usize..700, seed in 0u64..100) {
            let m = model();
            let stft = Stft::new(StftConfig::default()).unwrap();
            let x = noise(len, seed);
            let streamed = enhance_streaming(&m, &x, chunk).unwrap();
            prop_assert_eq!(streamed.len(), len);
            prop_assert_eq!(&streamed, &enhance(&m, &stft, &x).unwrap());
            prop_assert_eq!(&streamed, &enhance_streaming(&m, &x, len).unwrap());
        }
    }
}
