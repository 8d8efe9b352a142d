//! Builds encoder-decoder checkpoints from scratch or from an encoder-only
//! checkpoint, and (de)serializes checkpoints.
//!
//! | mode       | encoder          | decoder                                          |
//! |------------|------------------|--------------------------------------------------|
//! | RND2RND    | fresh            | fresh                                            |
//! | WARM2RND   | copied           | fresh                                            |
//! | WARM2WARM  | copied           | copied from encoder layer `i`, cross-attn fresh  |
//!
//! In WARM2WARM the decoder takes the source encoder's token and position
//! embeddings, embedding norm, and for each layer `i` the self-attention,
//! feed-forward, and both norms of encoder layer `i`. Only the
//! cross-attention blocks (projections and their norm) are freshly drawn.
//! Decoder self-attention becomes causal through the runtime mask; no
//! weight is altered. Fresh tensors are drawn from the seed in name order,
//! so assembly is a pure function of `(source, mode, config, seed)`.

mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use crate::model::{expected_shapes, init_weights, EncoderDecoderModel, ModelConfig, ModelError, ModelKind};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("unsupported checkpoint format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("shape table disagrees with data: {0}")]
    ShapeTable(String),
    #[error("mode {0} needs a source encoder checkpoint")]
    MissingSource(AssemblyMode),
    #[error("source checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("source tensor `{name}` has shape {actual:?}, target expects {expected:?}")]
    TensorMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssemblyMode {
    #[serde(rename = "RND2RND")]
    Rnd2Rnd,
    #[serde(rename = "WARM2RND")]
    Warm2Rnd,
    #[serde(rename = "WARM2WARM")]
    Warm2Warm,
}

impl AssemblyMode {
    pub const ALL: [AssemblyMode; 3] = [Self::Rnd2Rnd, Self::Warm2Rnd, Self::Warm2Warm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rnd2Rnd => "RND2RND",
            Self::Warm2Rnd => "WARM2RND",
            Self::Warm2Warm => "WARM2WARM",
        }
    }

    pub fn needs_source(self) -> bool {
        self != Self::Rnd2Rnd
    }
}

impl fmt::Display for AssemblyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AssemblyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RND2RND" => Ok(Self::Rnd2Rnd),
            "WARM2RND" => Ok(Self::Warm2Rnd),
            "WARM2WARM" => Ok(Self::Warm2Warm),
            _ => Err(format!("unknown assembly mode `{s}` (rnd2rnd|warm2rnd|warm2warm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProvenanceMode {
    #[serde(rename = "RND2RND")]
    Rnd2Rnd,
    #[serde(rename = "WARM2RND")]
    Warm2Rnd,
    #[serde(rename = "WARM2WARM")]
    Warm2Warm,
    #[serde(rename = "TRAINED")]
    Trained,
}

impl From<AssemblyMode> for ProvenanceMode {
    fn from(m: AssemblyMode) -> Self {
        match m {
            AssemblyMode::Rnd2Rnd => Self::Rnd2Rnd,
            AssemblyMode::Warm2Rnd => Self::Warm2Rnd,
            AssemblyMode::Warm2Warm => Self::Warm2Warm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: ProvenanceMode,
    /// SHA-256 of the checkpoint this one was derived from.
    pub source_hash: Option<String>,
    pub seed: Option<u64>,
    /// Free-form history, oldest first.
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Note recorded on WARM2WARM checkpoints describing which decoder parts came from the source.
pub const WARM_DECODER_NOTE: &str =
    "decoder copied from source encoder layers (embeddings, self-attention, feed-forward, norms); cross-attention fresh";

/// Source-encoder tensor a decoder tensor is copied from in WARM2WARM, or
/// `None` for tensors that are always fresh (cross-attention).
pub fn warm_decoder_source(name: &str) -> Option<String> {
    if name == "decoder.output_proj.weight" {
        return Some("encoder.embed.token".into());
    }
    if let Some(rest) = name.strip_prefix("decoder.embed.") {
        return Some(format!("encoder.embed.{rest}"));
    }
    let rest = name.strip_prefix("decoder.layer.")?;
    let (layer, part) = rest.split_once('.')?;
    let mapped = if part.starts_with("cross_attn.") {
        return None;
    } else if let Some(p) = part.strip_prefix("self_attn.") {
        format!("self_attn.{p}")
    } else if let Some(p) = part.strip_prefix("ln_self.") {
        format!("ln_attn.{p}")
    } else if part.starts_with("ffn.") || part.starts_with("ln_ffn.") {
        part.to_string()
    } else {
        return None;
    };
    Some(format!("encoder.layer.{layer}.{mapped}"))
}

fn check_compatible(source: &Checkpoint, config: &ModelConfig, mode: AssemblyMode) -> Result<(), AssemblyError> {
    let s = &source.config;
    let pairs = [
        ("vocab_size", s.vocab_size, config.vocab_size),
        ("d_model", s.d_model, config.d_model),
        ("n_heads", s.n_heads, config.n_heads),
        ("d_ff", s.d_ff, config.d_ff),
        ("max_positions", s.max_positions, config.max_positions),
    ];
    for (name, src, tgt) in pairs {
        if src != tgt {
            return Err(AssemblyError::Incompatible(format!("{name}: source {src}, target {tgt}")));
        }
    }
    let needed = if mode == AssemblyMode::Warm2Warm {
        config.n_enc_layers.max(config.n_dec_layers)
    } else {
        config.n_enc_layers
    };
    if s.n_enc_layers < needed {
        return Err(AssemblyError::Incompatible(format!(
            "source has {} encoder layers, target needs {needed}",
            s.n_enc_layers
        )));
    }
    if config.use_segment_embeddings && !s.use_segment_embeddings {
        return Err(AssemblyError::Incompatible("target uses segment embeddings, source has none".into()));
    }
    Ok(())
}

/// Assembles a seq2seq checkpoint. `source` is read, never modified.
pub fn assemble(
    source: Option<&Checkpoint>,
    mode: AssemblyMode,
    config: &ModelConfig,
    seed: u64,
) -> Result<Checkpoint, AssemblyError> {
    config.validate().map_err(AssemblyError::Config)?;
    let mut weights = init_weights(config, ModelKind::Seq2Seq, seed);
    let mut notes = vec![format!("assembled {mode}")];
    let source_hash = match (mode.needs_source(), source) {
        (false, _) => None,
        (true, None) => return Err(AssemblyError::MissingSource(mode)),
        (true, Some(src)) => {
            check_compatible(src, config, mode)?;
            let expected = expected_shapes(config, ModelKind::Seq2Seq);
            for (name, shape) in &expected {
                let from = if name.starts_with("encoder.") {
                    Some(name.clone())
                } else if mode == AssemblyMode::Warm2Warm {
                    warm_decoder_source(name)
                } else {
                    None
                };
                let Some(from) = from else { continue };
                let t = src
                    .weights
                    .get(&from)
                    .ok_or_else(|| AssemblyError::Incompatible(format!("source lacks tensor `{from}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(AssemblyError::TensorMismatch {
                        name: from,
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                weights.insert(name.clone(), t.clone());
            }
            if mode == AssemblyMode::Warm2Warm {
                notes.push(WARM_DECODER_NOTE.to_string());
            }
            Some(src.hash())
        }
    };
    let model = EncoderDecoderModel::new(config.clone(), ModelKind::Seq2Seq, weights)?;
    let provenance = Provenance {
        mode: mode.into(),
        source_hash,
        seed: Some(seed),
        notes,
    };
    let vocab_ref = source.and_then(|s| s.vocab_ref.clone());
    Ok(Checkpoint::new(model, vocab_ref, provenance))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightOrigin {
    /// Bit-identical to the named source tensor.
    Copied(String),
    Fresh,
}

/// For every tensor of `assembled`, whether it is a verbatim copy of the
/// tensor it maps to in `source` (same name for encoder tensors, the
/// WARM2WARM mapping for decoder tensors).
pub fn structural_diff(assembled: &Checkpoint, source: &Checkpoint) -> Vec<(String, WeightOrigin)> {
    assembled
        .weights
        .iter()
        .map(|(name, t)| {
            let from = if name.starts_with("encoder.") {
                Some(name.clone())
            } else {
                warm_decoder_source(name)
            };
            let origin = match from.and_then(|f| source.weights.get(&f).map(|s| (f, s))) {
                Some((f, s)) if bits_equal(s.data(), t.data()) && s.shape() == t.shape() => WeightOrigin::Copied(f),
                _ => WeightOrigin::Fresh,
            };
            (name.clone(), origin)
        })
        .collect()
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
