//! Transformer encoder-decoder.
//!
//! Encoder: learned token + position (+ optional segment) embeddings,
//! layer-normed, then post-norm blocks of bidirectional self-attention and
//! a feed-forward network. Decoder: the same embedding scheme, then blocks
//! of causal self-attention, cross-attention over the encoder memory, and
//! a feed-forward network. Output logits are `hidden · Eᵀ` where `E` is the
//! decoder token embedding when tied, or a separate `[vocab, d_model]`
//! projection otherwise.

mod config;
pub mod params;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub use config::{ModelConfig, MASK_VALUE, NORM_PLACEMENT};
pub use params::{expected_shapes, init_weights, output_projection_name, ModelKind, Weights};

use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::PAD;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("weight `{name}` has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected weight `{0}`")]
    UnexpectedWeight(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("operation requires a {expected:?} model, this one is {actual:?}")]
    WrongKind { expected: ModelKind, actual: ModelKind },
    #[error("invalid batch: {0}")]
    Batch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Right-padded batch of token id sequences, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    /// Segment id (0 or 1) per position, only used with segment embeddings.
    pub segments: Option<Vec<u32>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(ModelError::Batch("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            segments: None,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn is_pad(&self, b: usize, t: usize) -> bool {
        self.ids[b * self.len + t] == PAD
    }

    /// `[batch, len, len]` additive mask hiding padded keys.
    fn key_pad_mask(&self, query_len: usize) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.batch * query_len * self.len);
        for b in 0..self.batch {
            for _ in 0..query_len {
                m.extend((0..self.len).map(|j| if self.is_pad(b, j) { MASK_VALUE } else { 0.0 }));
            }
        }
        m
    }
}

fn causal_mask(batch: usize, len: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(batch * len * len);
    for _ in 0..batch {
        for i in 0..len {
            m.extend((0..len).map(|j| if j > i { MASK_VALUE } else { 0.0 }));
        }
    }
    m
}

/// Dropout switch for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut SplitMix64),
}

/// Parameters recorded on one tape, by canonical name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingWeight(name.to_string()))
    }

    /// Gradient per parameter after `tape.backward`; parameters unreachable
    /// from the loss get zeros.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderModel {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub weights: Weights,
}

impl EncoderDecoderModel {
    /// Validates that `weights` holds exactly the parameters `config` and `kind` require.
    pub fn new(config: ModelConfig, kind: ModelKind, weights: Weights) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        check_weights(&config, kind, &weights)?;
        Ok(Self { config, kind, weights })
    }

    pub fn random(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let weights = init_weights(&config, kind, seed);
        Ok(Self { config, kind, weights })
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`; `trainable` marks them as requiring grad.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .weights
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => Ok(tape.dropout(x, self.config.dropout, rng)?),
        }
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, side: &str, batch: &Batch, mode: &mut Mode) -> Result<Var> {
        let c = &self.config;
        if batch.len > c.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: batch.len,
                max: c.max_positions,
            });
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let tok = tape.embedding(p.get(&format!("{side}.embed.token"))?, &ids)?;
        let pos = tape.embedding(p.get(&format!("{side}.embed.position"))?, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if side == "encoder" && c.use_segment_embeddings {
            let segs: Vec<usize> = match &batch.segments {
                Some(s) => s.iter().map(|&v| v as usize).collect(),
                None => vec![0; ids.len()],
            };
            let seg = tape.embedding(p.get("encoder.embed.segment")?, &segs)?;
            x = tape.add(x, seg)?;
        }
        let x = tape.reshape(x, &[batch.batch, batch.len, c.d_model])?;
        let x = self.norm(tape, p, &format!("{side}.embed.ln"), x)?;
        self.dropout(tape, x, mode)
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{prefix}.gain"))?;
        let bias = p.get(&format!("{prefix}.bias"))?;
        Ok(tape.layer_norm(x, gain, bias, self.config.layer_norm_eps)?)
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{prefix}.weight"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        Ok(tape.linear(x, w, b)?)
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let x = tape.reshape(x, &[batch, len, h, dh])?;
        let x = tape.swap_axes12(x)?;
        Ok(tape.reshape(x, &[batch * h, len, dh])?)
    }

    /// Multi-head attention of `query [B, lq, d]` over `kv [B, lk, d]` with
    /// an additive `[B, lq, lk]` mask.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: &str,
        query: Var,
        kv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        mask: &[f64],
    ) -> Result<Var> {
        let (d, h, dh) = (self.config.d_model, self.config.n_heads, self.config.head_dim());
        let q = self.linear(tape, p, &format!("{prefix}.q"), query)?;
        let k = self.linear(tape, p, &format!("{prefix}.k"), kv)?;
        let v = self.linear(tape, p, &format!("{prefix}.v"), kv)?;
        let q = self.split_heads(tape, q, batch, lq)?;
        let k = self.split_heads(tape, k, batch, lk)?;
        let v = self.split_heads(tape, v, batch, lk)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add_mask(scores, mask, h)?;
        let probs = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, h, lq, dh])?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, &[batch, lq, d])?;
        self.linear(tape, p, &format!("{prefix}.o"), ctx)
    }

    fn feed_forward(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let hdn = self.linear(tape, p, &format!("{prefix}.in"), x)?;
        let hdn = tape.activation(hdn, self.config.activation);
        self.linear(tape, p, &format!("{prefix}.out"), hdn)
    }

    /// `LayerNorm(x + dropout(y))`.
    fn residual(&self, tape: &mut Tape, p: &Bound, norm: &str, x: Var, y: Var, mode: &mut Mode) -> Result<Var> {
        let y = self.dropout(tape, y, mode)?;
        let s = tape.add(x, y)?;
        self.norm(tape, p, norm, s)
    }

    /// Bidirectional encoder over `src`; returns memory `[B, L, d_model]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, src: &Batch, mode: &mut Mode) -> Result<Var> {
        let (b, l) = (src.batch, src.len);
        let mask = src.key_pad_mask(l);
        let mut x = self.embed(tape, p, "encoder", src, mode)?;
        for i in 0..self.config.n_enc_layers {
            let pre = format!("encoder.layer.{i}");
            let a = self.attention(tape, p, &format!("{pre}.self_attn"), x, x, b, l, l, &mask)?;
            x = self.residual(tape, p, &format!("{pre}.ln_attn"), x, a, mode)?;
            let f = self.feed_forward(tape, p, &format!("{pre}.ffn"), x)?;
            x = self.residual(tape, p, &format!("{pre}.ln_ffn"), x, f, mode)?;
        }
        Ok(x)
    }

    /// Decoder hidden states `[B, T, d_model]` for `tgt` given encoder memory.
    pub fn decode_hidden(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tgt: &Batch,
        memory: Var,
        src: &Batch,
        mode: &mut Mode,
    ) -> Result<Var> {
        self.require(ModelKind::Seq2Seq)?;
        let (b, t, ls) = (tgt.batch, tgt.len, src.len);
        if src.batch != b || tape.shape(memory) != [b, ls, self.config.d_model] {
            return Err(ModelError::Batch(format!(
                "target batch {b} does not match memory {:?}",
                tape.shape(memory)
            )));
        }
        let self_mask = causal_mask(b, t);
        let cross_mask = src.key_pad_mask(t);
        let mut x = self.embed(tape, p, "decoder", tgt, mode)?;
        for i in 0..self.config.n_dec_layers {
            let pre = format!("decoder.layer.{i}");
            let a = self.attention(tape, p, &format!("{pre}.self_attn"), x, x, b, t, t, &self_mask)?;
            x = self.residual(tape, p, &format!("{pre}.ln_self"), x, a, mode)?;
            let c = self.attention(tape, p, &format!("{pre}.cross_attn"), x, memory, b, t, ls, &cross_mask)?;
            x = self.residual(tape, p, &format!("{pre}.cross_attn.ln"), x, c, mode)?;
            let f = self.feed_forward(tape, p, &format!("{pre}.ffn"), x)?;
            x = self.residual(tape, p, &format!("{pre}.ln_ffn"), x, f, mode)?;
        }
        Ok(x)
    }

    /// `hidden · Eᵀ` -> `[B, T, vocab]`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let proj = p.get(output_projection_name(&self.config))?;
        Ok(tape.matmul_nt(hidden, proj)?)
    }

    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tgt_prefix: &Batch,
        memory: Var,
        src: &Batch,
        mode: &mut Mode,
    ) -> Result<Var> {
        let h = self.decode_hidden(tape, p, tgt_prefix, memory, src, mode)?;
        self.project(tape, p, h)
    }

    /// Teacher-forced loss: predict `tgt[1..]` from `tgt[..len-1]`,
    /// ignoring PAD targets.
    pub fn forward_loss(&self, tape: &mut Tape, p: &Bound, src: &Batch, tgt: &Batch, mode: &mut Mode) -> Result<Var> {
        if tgt.len < 2 || src.batch != tgt.batch {
            return Err(ModelError::Batch(
                "target needs at least two positions and a matching source batch".into(),
            ));
        }
        let t_in = tgt.len - 1;
        let mut inputs = Vec::with_capacity(tgt.batch * t_in);
        let mut targets = Vec::with_capacity(tgt.batch * t_in);
        for b in 0..tgt.batch {
            let row = tgt.row(b);
            inputs.extend_from_slice(&row[..t_in]);
            targets.extend(row[1..].iter().map(|&id| id as usize));
        }
        let input = Batch {
            ids: inputs,
            batch: tgt.batch,
            len: t_in,
            segments: None,
        };
        let memory = self.encode(tape, p, src, mode)?;
        let logits = self.decode_logits(tape, p, &input, memory, src, mode)?;
        let logits = tape.reshape(logits, &[tgt.batch * t_in, self.config.vocab_size])?;
        Ok(tape.cross_entropy(logits, &targets, PAD as usize)?)
    }

    /// Masked-LM logits `[positions.len(), vocab]` for flat positions into
    /// the `[B * L]` encoder output.
    pub fn mlm_logits(&self, tape: &mut Tape, p: &Bound, hidden: Var, positions: &[usize]) -> Result<Var> {
        self.require(ModelKind::Encoder)?;
        let n = tape.value(hidden).len() / self.config.d_model;
        let flat = tape.reshape(hidden, &[n, self.config.d_model])?;
        let picked = tape.embedding(flat, positions)?;
        let h = self.linear(tape, p, "mlm.transform", picked)?;
        let h = tape.activation(h, self.config.activation);
        let h = self.norm(tape, p, "mlm.ln", h)?;
        let logits = tape.matmul_nt(h, p.get("encoder.embed.token")?)?;
        Ok(tape.add_bias(logits, p.get("mlm.output_bias")?)?)
    }

    fn require(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(ModelError::WrongKind {
                expected: kind,
                actual: self.kind,
            });
        }
        Ok(())
    }

    /// Encoder memory without recording gradients.
    pub fn encode_eval(&self, src: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let m = self.encode(&mut tape, &p, src, &mut Mode::Eval)?;
        Ok(tape.value(m).clone())
    }

    /// Logits `[B, T, vocab]` for target prefixes against precomputed memory.
    pub fn decode_logits_eval(&self, tgt_prefix: &Batch, memory: &Tensor, src: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_decoder_only(&mut tape);
        let m = tape.constant(memory.clone());
        let l = self.decode_logits(&mut tape, &p, tgt_prefix, m, src, &mut Mode::Eval)?;
        Ok(tape.value(l).clone())
    }

    fn bind_decoder_only(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .weights
            .iter()
            .filter(|(name, _)| name.starts_with("decoder."))
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Exactly the expected names, each with the expected shape.
pub fn check_weights(config: &ModelConfig, kind: ModelKind, weights: &Weights) -> Result<()> {
    let expected = expected_shapes(config, kind);
    for (name, shape) in &expected {
        let t = weights
            .get(name)
            .ok_or_else(|| ModelError::MissingWeight(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::WeightShape {
                name: name.clone(),
                expected: shape.clone(),
                actual: t.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = weights.keys().find(|k| !expected.contains_key(*k)) {
        return Err(ModelError::UnexpectedWeight(extra.clone()));
    }
    Ok(())
}
