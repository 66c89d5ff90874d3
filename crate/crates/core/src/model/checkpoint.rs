//! Binary checkpoints.
//!
//! Layout: 8-byte magic `ERNNCKPT`, `u32` format version, `u64` header length
//! (both little-endian), a UTF-8 JSON header, then little-endian `f32` blobs.
//! The header carries the model configuration and a manifest of
//! `{name, shape, offset}` entries; offsets count `f32` values from the start
//! of the blob section. Optimizer moments, when present, are listed in the
//! same manifest under `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskModel, ModelConfig, ModelError};
use crate::numerics::{AdamConfig, AdamState, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"ERNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated: {section} needs {needed} bytes, {available} available")]
    Truncated {
        section: String,
        needed: u64,
        available: u64,
    },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    #[serde(flatten)]
    config: AdamConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    parameters: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam: Option<OptimizerHeader>,
}

/// A loaded checkpoint. Weights are stored in `f32`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MaskModel<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn m_name(name: &str) -> String {
    format!("adam.m/{name}")
}

fn v_name(name: &str) -> String {
    format!("adam.v/{name}")
}

/// Serializes `model` (and optionally its optimizer state) to `out`.
/// Values are narrowed to `f32`.
pub fn write_checkpoint<T: Real, W: Write>(
    out: &mut W,
    model: &MaskModel<T>,
    adam: Option<&AdamState<T>>,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&Tensor<T>> = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: String, t: &'_ Tensor<T>, entries: &mut Vec<Entry>| {
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() as u64;
    };
    for p in model.store().iter() {
        push(p.name.clone(), &p.value, &mut entries);
        blobs.push(&p.value);
    }
    if let Some(st) = adam {
        if st.m.len() != model.store().len() || st.v.len() != model.store().len() {
            return Err(CheckpointError::Manifest(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        for (p, m) in model.store().iter().zip(&st.m) {
            push(m_name(&p.name), m, &mut entries);
            blobs.push(m);
        }
        for (p, v) in model.store().iter().zip(&st.v) {
            push(v_name(&p.name), v, &mut entries);
            blobs.push(v);
        }
    }
    let header = Header {
        config: *model.config(),
        parameters: entries,
        adam: adam.map(|st| OptimizerHeader {
            step: st.step,
            config: st.config,
        }),
    };
    let json = serde_json::to_vec(&header)?;

    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for t in blobs {
        buf.clear();
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, section: &str) -> Result<&'a [u8], CheckpointError> {
    bytes.get(at..at + n).ok_or_else(|| CheckpointError::Truncated {
        section: section.to_string(),
        needed: (at + n) as u64,
        available: bytes.len() as u64,
    })
}

/// Parses a checkpoint from an in-memory byte buffer.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let magic = bytes.get(..8).unwrap_or(bytes);
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, 8, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, 12, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated {
        section: "header".into(),
        needed: header_len,
        available: bytes.len() as u64,
    })?;
    let header: Header = serde_json::from_slice(take(bytes, PREFIX_LEN, header_len, "header")?)?;
    let data = &bytes[PREFIX_LEN + header_len..];

    let mut manifest: HashMap<&str, &Entry> = HashMap::new();
    for e in &header.parameters {
        if manifest.insert(&e.name, e).is_some() {
            return Err(CheckpointError::Manifest(format!("duplicate entry `{}`", e.name)));
        }
    }
    let read_tensor = |name: &str, expected: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let e = manifest
            .get(name)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing entry `{name}`")))?;
        if e.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        let n: usize = e.shape.iter().product();
        let start = usize::try_from(e.offset).unwrap_or(usize::MAX / 8) * 4;
        let raw = take(data, start, n * 4, name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(e.shape.clone(), values).expect("shape checked"))
    };

    let mut model = MaskModel::<f32>::new(header.config)?;
    let names: Vec<(String, Vec<usize>)> = model
        .store()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (p, (name, shape)) in model.store_mut().iter_mut().zip(&names) {
        p.value = read_tensor(name, shape)?;
    }
    let mut expected_entries = names.len();

    let adam = match header.adam {
        None => None,
        Some(opt) => {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (name, shape) in &names {
                m.push(read_tensor(&m_name(name), shape)?);
                v.push(read_tensor(&v_name(name), shape)?);
            }
            expected_entries *= 3;
            Some(AdamState {
                config: opt.config,
                step: opt.step,
                m,
                v,
            })
        }
    };
    if header.parameters.len() != expected_entries {
        return Err(CheckpointError::Manifest(format!(
            "{} manifest entries, expected {expected_entries}",
            header.parameters.len()
        )));
    }
    Ok(Checkpoint { model, adam })
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &MaskModel<T>,
    adam: Option<&AdamState<T>>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, adam)?;
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::adam_step;

    fn trained_pair() -> (MaskModel<f32>, AdamState<f32>) {
        let mut model = MaskModel::<f32>::new(ModelConfig::ernn(8, 4, 2).with_seed(3)).unwrap();
        let mut st = AdamState::new(model.store(), AdamConfig::default());
        for (i, p) in model.store_mut().iter_mut().enumerate() {
            for (j, g) in p.grad.data_mut().iter_mut().enumerate() {
                *g = ((i * 7 + j) as f32).sin();
            }
        }
        adam_step(model.store_mut(), &mut st).unwrap();
        (model, st)
    }

    fn bytes_of(model: &MaskModel<f32>, st: Option<&AdamState<f32>>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, model, st).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, st) = trained_pair();
        let ck = read_checkpoint(&bytes_of(&model, Some(&st))).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.adam.unwrap(), st);

        let ck = read_checkpoint(&bytes_of(&model, None)).unwrap();
        assert_eq!(ck.model, model);
        assert!(ck.adam.is_none());
    }

    #[test]
    fn lstm_round_trip_through_file() {
        let model = MaskModel::<f32>::new(ModelConfig::lstm2(5).with_seed(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ck.bin");
        save_checkpoint(&path, &model, None).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().model, model);
    }

    #[test]
    fn prefix_layout() {
        let (model, _) = trained_pair();
        let b = bytes_of(&model, None);
        assert_eq!(&b[..8], b"ERNNCKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        assert_eq!(b.len(), 20 + hl + 4 * model.num_parameters());
        let header: serde_json::Value = serde_json::from_slice(&b[20..20 + hl]).unwrap();
        assert_eq!(header["config"]["architecture"], "ernn");
        assert_eq!(header["parameters"][0]["offset"], 0);
    }

    #[test]
    fn bad_magic() {
        let (model, _) = trained_pair();
        let mut b = bytes_of(&model, None);
        b[0] = b'X';
        assert!(matches!(read_checkpoint(&b), Err(CheckpointError::BadMagic { .. })));
        assert!(matches!(read_checkpoint(b"ERN"), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version() {
        let (model, _) = trained_pair();
        let mut b = bytes_of(&model, None);
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&b),
            Err(CheckpointError::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn truncated_blob() {
        let (model, st) = trained_pair();
        let b = bytes_of(&model, Some(&st));
        for cut in [b.len() - 1, b.len() - 400, 30, 15] {
            assert!(
                matches!(read_checkpoint(&b[..cut]), Err(CheckpointError::Truncated { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn shape_mismatch() {
        let (model, _) = trained_pair();
        let b = bytes_of(&model, None);
        let hl = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&b[20..20 + hl]).unwrap();
        header["parameters"][0]["shape"] = serde_json::json!([4, 257]);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = b[..12].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&b[20 + hl..]);
        match read_checkpoint(&out) {
            Err(CheckpointError::ShapeMismatch { name, expected, found }) => {
                assert_eq!(name, "ernn.fc_psi.w");
                assert_eq!(expected, vec![8, 257]);
                assert_eq!(found, vec![4, 257]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
