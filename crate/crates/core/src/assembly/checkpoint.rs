//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"WSUMCKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header (see `Header`)
//! 20+H    8*N   tensor data, f64 little-endian, in header table order
//! ```
//!
//! The header holds the model config, model kind, vocabulary reference,
//! provenance, and a table of `{name, shape, offset}` entries where
//! `offset` counts f64 elements from the start of the data block. Entries
//! are sorted by name and packed contiguously.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AssemblyError, Provenance};
use crate::model::{check_weights, EncoderDecoderModel, ModelConfig, ModelKind, Weights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WSUMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub weights: Weights,
    pub vocab_ref: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
    vocab_ref: Option<String>,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: EncoderDecoderModel, vocab_ref: Option<String>, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: model.kind,
            config: model.config,
            weights: model.weights,
            vocab_ref,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<(), AssemblyError> {
        self.config.validate().map_err(AssemblyError::Config)?;
        check_weights(&self.config, self.kind, &self.weights)?;
        Ok(())
    }

    pub fn to_model(&self) -> Result<EncoderDecoderModel, AssemblyError> {
        Ok(EncoderDecoderModel::new(
            self.config.clone(),
            self.kind,
            self.weights.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .weights
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            vocab_ref: self.vocab_ref.clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.weights.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AssemblyError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(AssemblyError::NotACheckpoint);
        }
        if bytes.len() < 20 {
            return Err(AssemblyError::Truncated("fixed preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(AssemblyError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AssemblyError::Truncated("header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| AssemblyError::BadHeader(e.to_string()))?;
        let data = &bytes[data_start..];
        if data.len() % 8 != 0 {
            return Err(AssemblyError::Truncated("tensor data is not a whole number of f64 values".into()));
        }
        let n_values = data.len() / 8;

        let mut weights = Weights::new();
        let mut expected_offset = 0usize;
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(AssemblyError::ShapeTable(format!(
                    "tensor `{}` at offset {} but the previous entry ends at {expected_offset}",
                    e.name, e.offset
                )));
            }
            let end = e.offset + len;
            if end > n_values {
                return Err(AssemblyError::Truncated(format!("data for tensor `{}`", e.name)));
            }
            let values = data[e.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, values).map_err(|err| AssemblyError::ShapeTable(err.to_string()))?;
            if weights.insert(e.name.clone(), t).is_some() {
                return Err(AssemblyError::ShapeTable(format!("duplicate tensor `{}`", e.name)));
            }
            expected_offset = end;
        }
        if expected_offset != n_values {
            return Err(AssemblyError::ShapeTable(format!(
                "{} trailing values not described by the table",
                n_values - expected_offset
            )));
        }
        let ckpt = Checkpoint {
            format_version: version,
            kind: header.kind,
            config: header.config,
            weights,
            vocab_ref: header.vocab_ref,
            provenance: header.provenance,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), AssemblyError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, AssemblyError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
