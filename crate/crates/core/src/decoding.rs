//! Greedy and beam-search generation.
//!
//! Both strategies work against any [`NextTokenScorer`], which lets the
//! tests drive them with small tabulated distributions as well as with a
//! real [`EncoderDecoderModel`] through [`ModelScorer`].
//!
//! Beam search keeps the `beam_size` best expansions per step, ranked by
//! cumulative log-probability (all expansions at a step have equal length,
//! so this matches the penalized ranking). Expansions ending in EOS are
//! retired; at `max_len` every surviving hypothesis is retired as
//! truncated. The result is the retired hypothesis with the highest
//! `log_prob / ((5 + len) / 6)^alpha`, `len` counting generated tokens;
//! ties go to the lexicographically smaller id sequence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, EncoderDecoderModel, ModelError};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, BOS, EOS, MASK, PAD};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decoding request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    /// Next-token log-probabilities (over the full vocabulary) for each of
    /// several equal-length prefixes.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSpecials {
    pub bos: u32,
    pub eos: u32,
    /// Never generated.
    pub banned: Vec<u32>,
}

impl Default for DecodeSpecials {
    fn default() -> Self {
        Self {
            bos: BOS,
            eos: EOS,
            banned: vec![PAD, BOS, MASK],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// BOS-prefixed.
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn generated_len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated_len(), alpha)
    }
}

/// GNMT length penalty `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub alpha: f64,
    /// Block any n-gram of this order from repeating; off by default.
    #[serde(default)]
    pub no_repeat_ngram: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 32,
            alpha: 1.0,
            no_repeat_ngram: None,
        }
    }
}

fn argmax_allowed(log_probs: &[f64], banned: &[u32]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (id, &lp) in log_probs.iter().enumerate() {
        let id = id as u32;
        if banned.contains(&id) {
            continue;
        }
        // strict > keeps the lowest id on ties
        if best.is_none_or(|(_, b)| lp > b) {
            best = Some((id, lp));
        }
    }
    best.map(|(id, _)| id)
}

pub fn greedy_decode<S: NextTokenScorer + ?Sized>(scorer: &S, specials: &DecodeSpecials, max_len: usize) -> Result<TokenSequence> {
    let mut ids = vec![specials.bos];
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&ids))?.remove(0);
        let next = argmax_allowed(&lp, &specials.banned)
            .ok_or_else(|| DecodeError::Invalid("every token is banned".into()))?;
        ids.push(next);
        if next == specials.eos {
            break;
        }
    }
    Ok(TokenSequence { ids })
}

fn blocked_by_ngram(ids: &[u32], next: u32, n: usize) -> bool {
    if n == 0 || ids.len() + 1 < n {
        return false;
    }
    let tail = &ids[ids.len() + 1 - n..];
    ids.windows(n).any(|w| w[..n - 1] == *tail && w[n - 1] == next)
}

fn rank(a: &BeamHypothesis, b: &BeamHypothesis, key: impl Fn(&BeamHypothesis) -> f64) -> Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.ids.cmp(&b.ids))
}

pub fn beam_search<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    specials: &DecodeSpecials,
    config: &BeamConfig,
) -> Result<BeamHypothesis> {
    if config.beam_size == 0 {
        return Err(DecodeError::Invalid("beam_size must be at least 1".into()));
    }
    let mut live = vec![BeamHypothesis {
        ids: vec![specials.bos],
        log_prob: 0.0,
        finished: false,
    }];
    let mut retired: Vec<BeamHypothesis> = Vec::new();
    for step in 1..=config.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.ids.clone()).collect();
        let log_probs = scorer.next_log_probs(&prefixes)?;
        let mut candidates = Vec::new();
        for (h, lp) in live.iter().zip(&log_probs) {
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as u32;
                if specials.banned.contains(&tok) {
                    continue;
                }
                if let Some(n) = config.no_repeat_ngram {
                    if blocked_by_ngram(&h.ids, tok, n) {
                        continue;
                    }
                }
                let mut ids = h.ids.clone();
                ids.push(tok);
                candidates.push(BeamHypothesis {
                    ids,
                    log_prob: h.log_prob + l,
                    finished: tok == specials.eos || step == config.max_len,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, |h| h.log_prob));
        candidates.truncate(config.beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                retired.push(c);
            } else {
                live.push(c);
            }
        }
    }
    // max_len == 0 or every expansion banned: fall back to the bare prefix
    retired.extend(live.into_iter().map(|mut h| {
        h.finished = true;
        h
    }));
    retired
        .into_iter()
        .min_by(|a, b| rank(a, b, |h| h.score(config.alpha)))
        .ok_or_else(|| DecodeError::Invalid("no hypotheses".into()))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - log_z).collect()
}

/// Scores prefixes for a single source sequence with a seq2seq model.
pub struct ModelScorer<'m> {
    model: &'m EncoderDecoderModel,
    src: Vec<u32>,
    memory: Tensor,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m EncoderDecoderModel, src: &[u32]) -> Result<Self> {
        let batch = Batch::from_sequences(&[src.to_vec()])?;
        let memory = model.encode_eval(&batch)?;
        Ok(Self {
            model,
            src: src.to_vec(),
            memory,
        })
    }

    /// Full teacher-forced log-probability of `ids` (BOS-prefixed) given the source.
    pub fn sequence_log_prob(&self, ids: &[u32]) -> Result<f64> {
        if ids.len() < 2 {
            return Ok(0.0);
        }
        let prefix = Batch::from_sequences(&[ids[..ids.len() - 1].to_vec()])?;
        let src = Batch::from_sequences(&[self.src.clone()])?;
        let logits = self.model.decode_logits_eval(&prefix, &self.memory, &src)?;
        let v = self.model.config.vocab_size;
        Ok(ids[1..]
            .iter()
            .enumerate()
            .map(|(t, &id)| log_softmax(&logits.data()[t * v..(t + 1) * v])[id as usize])
            .sum())
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let b = prefixes.len();
        let len = prefixes.first().map(Vec::len).unwrap_or(0);
        if b == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(DecodeError::Invalid("prefixes must be nonempty and of equal length".into()));
        }
        let srcs = vec![self.src.clone(); b];
        let src = Batch::from_sequences(&srcs)?;
        let mut mem = Vec::with_capacity(self.memory.len() * b);
        for _ in 0..b {
            mem.extend_from_slice(self.memory.data());
        }
        let mut shape = self.memory.shape().to_vec();
        shape[0] = b;
        let memory = Tensor::new(shape, mem).expect("tiled memory");
        let tgt = Batch::from_sequences(prefixes)?;
        let logits = self.model.decode_logits_eval(&tgt, &memory, &src)?;
        let v = self.model.config.vocab_size;
        Ok((0..b)
            .map(|i| {
                let row = (i * len + len - 1) * v;
                log_softmax(&logits.data()[row..row + v])
            })
            .collect())
    }
}

pub fn greedy_decode_model(model: &EncoderDecoderModel, src: &[u32], max_len: usize) -> Result<TokenSequence> {
    check_len(model, max_len)?;
    greedy_decode(&ModelScorer::new(model, src)?, &DecodeSpecials::default(), max_len)
}

pub fn beam_search_model(model: &EncoderDecoderModel, src: &[u32], config: &BeamConfig) -> Result<BeamHypothesis> {
    check_len(model, config.max_len)?;
    beam_search(&ModelScorer::new(model, src)?, &DecodeSpecials::default(), config)
}

fn check_len(model: &EncoderDecoderModel, max_len: usize) -> Result<()> {
    if max_len > model.config.max_positions {
        return Err(DecodeError::Invalid(format!(
            "max_len {max_len} exceeds max_positions {}",
            model.config.max_positions
        )));
    }
    Ok(())
}

/// Greedy decoding of many sources at once; each result matches
/// [`greedy_decode_model`] on that source.
pub fn greedy_decode_batch(model: &EncoderDecoderModel, srcs: &[Vec<u32>], max_len: usize) -> Result<Vec<TokenSequence>> {
    check_len(model, max_len)?;
    if srcs.is_empty() {
        return Ok(vec![]);
    }
    let specials = DecodeSpecials::default();
    let src = Batch::from_sequences(srcs)?;
    let memory = model.encode_eval(&src)?;
    let mut outs: Vec<Vec<u32>> = vec![vec![specials.bos]; srcs.len()];
    let mut done = vec![false; srcs.len()];
    let v = model.config.vocab_size;
    for step in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        // finished rows keep decoding on a frozen copy; their output is discarded
        let prefixes: Vec<Vec<u32>> = outs
            .iter()
            .map(|o| {
                let mut p = o.clone();
                p.resize(step + 1, specials.eos);
                p
            })
            .collect();
        let tgt = Batch::from_sequences(&prefixes)?;
        let logits = model.decode_logits_eval(&tgt, &memory, &src)?;
        for (i, out) in outs.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            let row = (i * (step + 1) + step) * v;
            let lp = log_softmax(&logits.data()[row..row + v]);
            let next = argmax_allowed(&lp, &specials.banned)
                .ok_or_else(|| DecodeError::Invalid("every token is banned".into()))?;
            out.push(next);
            if next == specials.eos {
                done[i] = true;
            }
        }
    }
    Ok(outs.into_iter().map(|ids| TokenSequence { ids }).collect())
}

/// Tabulated scorer: next-token log-probs are a fixed function of the
/// last token and the prefix length. Used by tests and examples.
#[derive(Debug, Clone)]
pub struct TableScorer {
    pub vocab: usize,
    /// `table[(prefix_len - 1) * vocab + last_token]` -> log-probs
    pub table: Vec<Vec<f64>>,
    pub max_prefix: usize,
}

impl TableScorer {
    pub fn random(vocab: usize, max_prefix: usize, rng: &mut crate::rng::SplitMix64) -> Self {
        let table = (0..vocab * max_prefix)
            .map(|_| {
                let logits: Vec<f64> = (0..vocab).map(|_| 3.0 * rng.normal()).collect();
                log_softmax(&logits)
            })
            .collect();
        Self { vocab, table, max_prefix }
    }
}

impl NextTokenScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        prefixes
            .iter()
            .map(|p| {
                let l = p.len();
                if l == 0 || l > self.max_prefix {
                    return Err(DecodeError::Invalid(format!("prefix length {l} outside table")));
                }
                let last = *p.last().unwrap() as usize;
                Ok(self.table[(l - 1) * self.vocab + last].clone())
            })
            .collect()
    }
}
