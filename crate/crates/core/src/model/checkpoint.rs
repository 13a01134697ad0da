//! Binary checkpoint format: `TKFD`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every array as little-endian floats in
//! manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ArraySpec, ModelConfig, ModelParams};
use crate::corpus::{BpeVocab, VocabFile};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TKFD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// Lossless round trip.
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<VocabFile>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Option<BpeVocab>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, vocab: Option<&BpeVocab>) -> Result<()> {
    save_checkpoint_with(path, params, vocab, Dtype::F64)
}

pub fn save_checkpoint_with(
    path: &Path,
    params: &ModelParams,
    vocab: Option<&BpeVocab>,
    dtype: Dtype,
) -> Result<()> {
    let arrays = params.arrays();
    let header = Header {
        config: params.config.clone(),
        manifest: arrays
            .iter()
            .map(|(ArraySpec { name, shape }, _)| ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype,
            })
            .collect(),
        vocab: vocab.map(|v| v.file().clone()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.num_values() * dtype.width());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, values) in &arrays {
        for &v in values.iter() {
            match dtype {
                Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    // write-then-rename so a reader never sees a half-written file
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", bytes.len())))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
    let hlen = usize::try_from(hlen).map_err(|_| Error::CorruptCheckpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, hlen)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let mut params = init_params(&header.config).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let expected: Vec<ArraySpec> = params.arrays().into_iter().map(|(s, _)| s).collect();
    if expected.len() != header.manifest.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest has {} arrays, config implies {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.manifest) {
        if want.name != got.name || want.shape != got.shape {
            return Err(Error::CorruptCheckpoint(format!(
                "array {} {:?} does not match expected {} {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }
    for (dst, entry) in params.arrays_mut().into_iter().zip(&header.manifest) {
        let w = entry.dtype.width();
        let raw = take(bytes, &mut pos, dst.len() * w)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(w)) {
            *d = match entry.dtype {
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            };
        }
    }
    if pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let vocab = header
        .vocab
        .map(BpeVocab::from_file)
        .transpose()
        .map_err(|e| Error::CorruptCheckpoint(format!("vocab: {e}")))?;
    Ok(Checkpoint { params, vocab })
}
