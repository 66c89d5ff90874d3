use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::SAMPLE_RATE;

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: expected mono audio, found {found} channels")]
    Channels { path: PathBuf, found: u16 },
    #[error("{path}: expected {SAMPLE_RATE} Hz, found {found} Hz")]
    SampleRate { path: PathBuf, found: u32 },
    #[error("{path}: unsupported sample format {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

/// Reads a 16 kHz mono WAV file. 16-bit PCM is scaled by `1/32768`; 32-bit
/// float samples are passed through.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Vec<f32>, WavError> {
    let path = path.as_ref();
    let read_err = |source| WavError::Read {
        path: path.to_path_buf(),
        source,
    };
    let reader = WavReader::open(path).map_err(read_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(WavError::Channels {
            path: path.to_path_buf(),
            found: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(WavError::SampleRate {
            path: path.to_path_buf(),
            found: spec.sample_rate,
        });
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(read_err),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(read_err),
        (fmt, bits) => Err(WavError::Format {
            path: path.to_path_buf(),
            detail: format!("{fmt:?} {bits}-bit"),
        }),
    }
}

/// Writes 16 kHz mono 16-bit PCM. Samples are clipped to `[-1, 1)` first;
/// returns how many were clipped.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<usize, WavError> {
    let path = path.as_ref();
    let write_err = |source| WavError::Write {
        path: path.to_path_buf(),
        source,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(write_err)?;
    let mut clipped = 0;
    for &s in samples {
        let q = (s as f64 * 32768.0).round();
        let q = if q > 32767.0 {
            clipped += 1;
            32767.0
        } else if q < -32768.0 || s.is_nan() {
            clipped += 1;
            if s.is_nan() { 0.0 } else { -32768.0 }
        } else {
            q
        };
        writer.write_sample(q as i16).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)?;
    Ok(clipped)
}

/// Writes 16 kHz mono 32-bit float samples without clipping.
pub fn write_wav_f32(path: impl AsRef<Path>, samples: &[f32]) -> Result<(), WavError> {
    let path = path.as_ref();
    let write_err = |source| WavError::Write {
        path: path.to_path_buf(),
        source,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(write_err)?;
    for &s in samples {
        writer.write_sample(s).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}
