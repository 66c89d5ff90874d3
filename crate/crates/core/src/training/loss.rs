use num_complex::Complex;

use crate::dsp::{Spectrogram, Stft};
use crate::model::MaskModel;
use crate::numerics::{Graph, NodeId, Real};

use super::{Result, TrainingError};

/// `(1/L) Σ |s − ŝ|`, with compensated 64-bit summation.
pub fn mae<T: Real>(reference: &[T], estimate: &[T]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&a, &b) in reference.iter().zip(estimate) {
        let v = (a.as_f64() - b.as_f64()).abs();
        let t = sum + v;
        comp += if sum >= v { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    (sum + comp) / reference.len() as f64
}

/// Masks `spec` with the per-frame mask nodes, resynthesizes `clean.len()`
/// samples and records the time-domain MAE against `clean` as a scalar
/// node whose partials flow into the masks only.
pub fn mae_from_masks<T: Real>(
    g: &mut Graph<'_, T>,
    stft: &Stft<T>,
    spec: &Spectrogram<T>,
    masks: &[NodeId],
    clean: &[T],
) -> Result<NodeId> {
    let len = clean.len();
    let bins = spec.bins();
    if masks.len() != spec.frames() {
        return Err(TrainingError::Config(format!(
            "{} mask frames for a {}-frame spectrogram",
            masks.len(),
            spec.frames()
        )));
    }
    let mut masked = Spectrogram::zeros(spec.frames(), bins);
    for (t, &m) in masks.iter().enumerate() {
        let gains = g.value(m);
        if gains.len() != bins {
            return Err(TrainingError::Config(format!(
                "mask frame has {} bins, expected {bins}",
                gains.len()
            )));
        }
        for ((y, &x), &gain) in masked.frame_mut(t).iter_mut().zip(spec.frame(t)).zip(gains) {
            *y = x * gain;
        }
    }
    let estimate = stft.istft(&masked, len)?;
    let value = mae(clean, &estimate);

    // ∂L/∂ŝ = sign(ŝ − s)/L, pulled back through overlap-add, the synthesis
    // window and the inverse transform of each frame.
    let inv_len = T::of(1.0 / len as f64);
    let d_est: Vec<T> = estimate
        .iter()
        .zip(clean)
        .map(|(&e, &s)| {
            let d = e - s;
            if d > T::zero() {
                inv_len
            } else if d < T::zero() {
                -inv_len
            } else {
                T::zero()
            }
        })
        .collect();

    let cfg = *stft.config();
    let n_fft = T::of(cfg.fft_len as f64);
    let wd = &stft.windows().synthesis;
    let mut gy = vec![T::zero(); cfg.window_len];
    let mut fy = vec![Complex::new(T::zero(), T::zero()); bins];
    let mut partials = Vec::with_capacity(masks.len());
    for t in 0..masks.len() {
        let start = stft.frame_start(t);
        for (n, v) in gy.iter_mut().enumerate() {
            let i = start + n as isize;
            *v = if i >= 0 && (i as usize) < len {
                wd[n] * d_est[i as usize]
            } else {
                T::zero()
            };
        }
        stft.dft(&mut gy, &mut fy);
        let two = T::of(2.0);
        let p: Vec<T> = spec
            .frame(t)
            .iter()
            .zip(&fy)
            .enumerate()
            .map(|(k, (x, f))| {
                let c = if k == 0 || k == bins - 1 { T::one() } else { two };
                c / n_fft * (x.re * f.re + x.im * f.im)
            })
            .collect();
        partials.push(p);
    }
    Ok(g.scalar_fn(masks.to_vec(), T::of(value), partials)?)
}

/// Time-domain MAE of the enhanced `noisy` against `clean`, recorded on `g`
/// (which must read `model`'s store).
pub fn mae_time_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &MaskModel<T>,
    stft: &Stft<T>,
    clean: &[T],
    noisy: &[T],
) -> Result<NodeId> {
    if clean.len() != noisy.len() {
        return Err(TrainingError::LengthMismatch {
            id: String::new(),
            noisy: noisy.len(),
            clean: clean.len(),
        });
    }
    let spec = stft.stft(noisy)?;
    let features = crate::dsp::log_magnitude(&spec);
    let masks = model.record_sequence(g, &features)?;
    mae_from_masks(g, stft, &spec, &masks, clean)
}
