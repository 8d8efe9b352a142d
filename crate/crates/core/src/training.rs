//! Adam, MLM pretraining of an encoder, and teacher-forced seq2seq fine-tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{Checkpoint, Provenance, ProvenanceMode};
use crate::corpus::CorpusExample;
use crate::decoding::{greedy_decode_batch, DecodeError};
use crate::model::{Batch, EncoderDecoderModel, Mode, ModelConfig, ModelError, ModelKind, Weights};
use crate::rng::SplitMix64;
use crate::rouge::{corpus_rouge, EvalTokenization, RougeError};
use crate::tensor::{Tape, TensorError};
use crate::tokenizer::{TokenizerError, Vocabulary, BOS, EOS, MASK, PAD, SPECIAL_TOKENS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Rouge(#[from] RougeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("non-finite gradient in `{param}` at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("gradient for `{param}` has {actual} values, parameter has {expected}")]
    GradShape { param: String, expected: usize, actual: usize },
    #[error("no gradient supplied for `{0}`")]
    MissingGrad(String),
    #[error("need at least {need} examples for one batch, have {have}")]
    TooFewExamples { have: usize, need: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint holds a {actual:?} model, expected {expected:?}")]
    WrongKind { expected: ModelKind, actual: ModelKind },
}

impl TrainError {
    /// NaN/inf failures, as opposed to data or configuration errors.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFiniteLoss { .. } | Self::NonFiniteGradient { .. } | Self::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which end of an over-long source is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Keep the beginning.
    #[default]
    Head,
    /// Keep the end.
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub mlm_mask_prob: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub gradient_clip_norm: Option<f64>,
    /// Dev evaluation period in steps (fine-tuning only).
    pub eval_every: usize,
    /// Evaluate on at most this many dev examples (in split order).
    pub dev_eval_limit: Option<usize>,
    pub truncation: Truncation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 16,
            max_src_len: 64,
            max_tgt_len: 32,
            mlm_mask_prob: 0.15,
            seed: 0,
            gradient_clip_norm: Some(1.0),
            eval_every: 200,
            dev_eval_limit: None,
            truncation: Truncation::Head,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return fail("total_steps, batch_size and eval_every must be positive");
        }
        if self.max_src_len < 2 || self.max_tgt_len < 2 {
            return fail("max_src_len and max_tgt_len must be at least 2 (BOS and EOS)");
        }
        if !(self.mlm_mask_prob > 0.0 && self.mlm_mask_prob < 1.0) {
            return fail("mlm_mask_prob must lie in (0, 1)");
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return fail("gradient_clip_norm must be positive when set");
            }
        }
        Ok(())
    }

    /// Linear warmup to `learning_rate` over `warmup_steps`, then linear
    /// decay towards zero at `total_steps`. `step` counts updates already made.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step);
        self.learning_rate * left as f64 / span as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(weights: &Weights) -> Self {
        let zeros: BTreeMap<_, _> = weights.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One bias-corrected Adam update at learning rate `lr`, after optional
/// global-norm clipping. Parameters are left untouched on error.
pub fn adam_step(
    weights: &mut Weights,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    let mut sq = 0.0;
    for (name, w) in weights.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
        if g.len() != w.len() {
            return Err(TrainError::GradShape {
                param: name.clone(),
                expected: w.len(),
                actual: g.len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                step: state.step + 1,
            });
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let scale = match config.gradient_clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, w) in weights.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((p, &g), m), v) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
        }
    }
    Ok(StepReport {
        grad_norm,
        clipped: scale < 1.0,
    })
}

/// Cuts a BOS..EOS sequence to `max` ids, keeping BOS and EOS at the ends.
pub fn truncate_ids(ids: &[u32], max: usize, how: Truncation) -> Vec<u32> {
    if ids.len() <= max {
        return ids.to_vec();
    }
    let (first, last) = (ids[0], ids[ids.len() - 1]);
    let inner = &ids[1..ids.len() - 1];
    let keep = max.saturating_sub(2);
    let kept = match how {
        Truncation::Head => &inner[..keep],
        Truncation::Tail => &inner[inner.len() - keep..],
    };
    let mut out = Vec::with_capacity(max);
    out.push(first);
    out.extend_from_slice(kept);
    out.push(last);
    out.truncate(max);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// BOS/EOS-wrapped, truncated ids for a body/abstract pair. The target
/// always keeps its beginning.
pub fn encode_pair(vocab: &Vocabulary, ex: &CorpusExample, config: &TrainConfig) -> EncodedPair {
    EncodedPair {
        src: truncate_ids(&vocab.encode(&ex.body, true).ids, config.max_src_len, config.truncation),
        tgt: truncate_ids(&vocab.encode(&ex.summary, true).ids, config.max_tgt_len, Truncation::Head),
    }
}

/// Text of generated ids: BOS dropped, cut at the first EOS.
pub fn ids_to_text(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let body = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    let end = body.iter().position(|&t| t == EOS).unwrap_or(body.len());
    Ok(vocab.decode(&body[..end])?)
}

/// Shuffles indices once per epoch and hands out consecutive batches.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: SplitMix64,
}

impl EpochSampler {
    fn new(n: usize, rng: SplitMix64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// MLM inputs for a flattened `[B, L]` id buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<u32>,
    /// Flat indices of selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

/// Selects each non-special position with probability `prob` (at least one
/// overall if any is eligible). Selected positions become MASK with
/// probability 0.8, a uniformly random non-special token with 0.1, and stay
/// unchanged otherwise.
pub fn mask_tokens(ids: &[u32], vocab_size: usize, prob: f64, rng: &mut SplitMix64) -> MaskedBatch {
    let first_regular = SPECIAL_TOKENS.len() as u32;
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= first_regular).collect();
    let mut positions: Vec<usize> = eligible.iter().copied().filter(|_| rng.bernoulli(prob)).collect();
    if positions.is_empty() && !eligible.is_empty() {
        positions.push(eligible[rng.below(eligible.len())]);
    }
    let mut inputs = ids.to_vec();
    let n_regular = vocab_size.saturating_sub(first_regular as usize).max(1);
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        let u = rng.next_f64();
        if u < 0.8 {
            inputs[p] = MASK;
        } else if u < 0.9 {
            inputs[p] = first_regular + rng.below(n_regular) as u32;
        }
    }
    MaskedBatch {
        inputs,
        positions,
        targets,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSplit {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: MetricSplit,
    pub loss: f64,
    pub rouge_l: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,loss,rouge_l";

impl MetricRecord {
    pub fn csv_line(&self) -> String {
        let split = match self.split {
            MetricSplit::Train => "train",
            MetricSplit::Dev => "dev",
        };
        let rouge = self.rouge_l.map(|r| format!("{r:.6}")).unwrap_or_default();
        format!("{},{split},{:.6},{rouge}", self.step, self.loss)
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// MLM loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Trains an encoder with an MLM head from scratch on `texts`.
pub fn pretrain_mlm(
    texts: &[String],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_metric: &mut dyn FnMut(&MetricRecord),
) -> Result<PretrainOutcome> {
    config.validate()?;
    if model_config.vocab_size != vocab.len() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    let seqs: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| truncate_ids(&vocab.encode(t, true).ids, config.max_src_len, config.truncation))
        .collect();
    if seqs.len() < config.batch_size {
        return Err(TrainError::TooFewExamples {
            have: seqs.len(),
            need: config.batch_size,
        });
    }
    let mut model = EncoderDecoderModel::random(model_config.clone(), ModelKind::Encoder, config.seed)?;
    let mut opt = OptimizerState::new(&model.weights);
    let mut sampler = EpochSampler::new(seqs.len(), SplitMix64::derive(config.seed, 1));
    let mut mask_rng = SplitMix64::derive(config.seed, 2);
    let mut drop_rng = SplitMix64::derive(config.seed, 3);

    let mut losses = Vec::with_capacity(config.total_steps);
    let mut window = 0.0;
    let mut window_n = 0;
    for step in 0..config.total_steps {
        let rows: Vec<Vec<u32>> = sampler
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| seqs[i].clone())
            .collect();
        let batch = Batch::from_sequences(&rows)?;
        let masked = mask_tokens(&batch.ids, model_config.vocab_size, config.mlm_mask_prob, &mut mask_rng);
        if masked.positions.is_empty() {
            return Err(TrainError::Config("batch has no maskable tokens".into()));
        }
        let input = Batch {
            ids: masked.inputs,
            ..batch
        };

        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let hidden = model.encode(&mut tape, &params, &input, &mut Mode::Train(&mut drop_rng))?;
        let logits = model.mlm_logits(&mut tape, &params, hidden, &masked.positions)?;
        let targets: Vec<usize> = masked.targets.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy(logits, &targets, usize::MAX)?;
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value });
        }
        tape.backward(loss)?;
        let grads = params.grads(&tape);
        adam_step(&mut model.weights, &grads, &mut opt, config, config.learning_rate_at(step))?;

        losses.push(value);
        window += value;
        window_n += 1;
        if (step + 1) % config.eval_every == 0 || step + 1 == config.total_steps {
            on_metric(&MetricRecord {
                step: step + 1,
                split: MetricSplit::Train,
                loss: window / window_n as f64,
                rouge_l: None,
            });
            window = 0.0;
            window_n = 0;
        }
    }
    let provenance = Provenance {
        mode: ProvenanceMode::Trained,
        source_hash: None,
        seed: Some(config.seed),
        notes: vec![format!("MLM pretraining, {} steps", config.total_steps)],
    };
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(model, None, provenance),
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevMetrics {
    pub loss: f64,
    pub rouge_l: f64,
}

/// Mean teacher-forced loss (averaged over batches) and greedy ROUGE-L F1.
pub fn evaluate_dev(
    model: &EncoderDecoderModel,
    vocab: &Vocabulary,
    pairs: &[EncodedPair],
    examples: &[CorpusExample],
    config: &TrainConfig,
    eval_tok: &EvalTokenization,
) -> Result<DevMetrics> {
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    let mut loss = 0.0;
    let mut n_batches = 0;
    let mut candidates = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(config.batch_size.max(32)) {
        let src = Batch::from_sequences(&chunk.iter().map(|p| p.src.clone()).collect::<Vec<_>>())?;
        let tgt = Batch::from_sequences(&chunk.iter().map(|p| p.tgt.clone()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let l = model.forward_loss(&mut tape, &params, &src, &tgt, &mut Mode::Eval)?;
        loss += tape.data(l)[0];
        n_batches += 1;
        let srcs: Vec<Vec<u32>> = chunk.iter().map(|p| p.src.clone()).collect();
        for out in greedy_decode_batch(model, &srcs, config.max_tgt_len - 1)? {
            candidates.push(ids_to_text(vocab, &out.ids)?);
        }
    }
    let scored: Vec<(&str, &str)> = candidates
        .iter()
        .zip(examples)
        .map(|(c, ex)| (c.as_str(), ex.summary.as_str()))
        .collect();
    let rouge = corpus_rouge(&scored, eval_tok, Some(vocab))?;
    Ok(DevMetrics {
        loss: loss / n_batches as f64,
        rouge_l: rouge.rouge_l.f1,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Weights with the best dev ROUGE-L seen (step 0 included; earliest wins ties).
    pub checkpoint: Checkpoint,
    pub best_step: usize,
    pub best_dev_rouge_l: f64,
    /// Mean training loss over the last evaluation window.
    pub final_train_loss: f64,
    pub metrics: Vec<MetricRecord>,
}

/// Teacher-forced fine-tuning of a seq2seq checkpoint, selecting the
/// checkpoint with the best dev ROUGE-L.
pub fn finetune(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    train: &[CorpusExample],
    dev: &[CorpusExample],
    config: &TrainConfig,
    eval_tok: &EvalTokenization,
    on_metric: &mut dyn FnMut(&MetricRecord),
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if ckpt.kind != ModelKind::Seq2Seq {
        return Err(TrainError::WrongKind {
            expected: ModelKind::Seq2Seq,
            actual: ckpt.kind,
        });
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    let mut model = ckpt.to_model().map_err(|e| TrainError::Config(e.to_string()))?;
    let train_pairs: Vec<EncodedPair> = train.iter().map(|e| encode_pair(vocab, e, config)).collect();
    let dev = &dev[..config.dev_eval_limit.unwrap_or(dev.len()).min(dev.len())];
    let dev_pairs: Vec<EncodedPair> = dev.iter().map(|e| encode_pair(vocab, e, config)).collect();

    let mut metrics = Vec::new();
    let mut record = |r: MetricRecord, metrics: &mut Vec<MetricRecord>| {
        on_metric(&r);
        metrics.push(r);
    };

    let initial = evaluate_dev(&model, vocab, &dev_pairs, dev, config, eval_tok)?;
    record(
        MetricRecord {
            step: 0,
            split: MetricSplit::Dev,
            loss: initial.loss,
            rouge_l: Some(initial.rouge_l),
        },
        &mut metrics,
    );
    let mut best = (0usize, initial.rouge_l, model.weights.clone());

    let mut opt = OptimizerState::new(&model.weights);
    let mut sampler = EpochSampler::new(train_pairs.len(), SplitMix64::derive(config.seed, 11));
    let mut drop_rng = SplitMix64::derive(config.seed, 12);
    let mut window = 0.0;
    let mut window_n = 0;
    let mut final_train_loss = f64::NAN;
    for step in 0..config.total_steps {
        let idx = sampler.next_batch(config.batch_size);
        let src = Batch::from_sequences(&idx.iter().map(|&i| train_pairs[i].src.clone()).collect::<Vec<_>>())?;
        let tgt = Batch::from_sequences(&idx.iter().map(|&i| train_pairs[i].tgt.clone()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let loss = model.forward_loss(&mut tape, &params, &src, &tgt, &mut Mode::Train(&mut drop_rng))?;
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value });
        }
        tape.backward(loss)?;
        let grads = params.grads(&tape);
        adam_step(&mut model.weights, &grads, &mut opt, config, config.learning_rate_at(step))?;

        window += value;
        window_n += 1;
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.total_steps {
            final_train_loss = window / window_n as f64;
            record(
                MetricRecord {
                    step: done,
                    split: MetricSplit::Train,
                    loss: final_train_loss,
                    rouge_l: None,
                },
                &mut metrics,
            );
            window = 0.0;
            window_n = 0;
            let m = evaluate_dev(&model, vocab, &dev_pairs, dev, config, eval_tok)?;
            record(
                MetricRecord {
                    step: done,
                    split: MetricSplit::Dev,
                    loss: m.loss,
                    rouge_l: Some(m.rouge_l),
                },
                &mut metrics,
            );
            if m.rouge_l > best.1 {
                best = (done, m.rouge_l, model.weights.clone());
            }
        }
    }

    let (best_step, best_dev_rouge_l, weights) = best;
    let mut notes = ckpt.provenance.notes.clone();
    notes.push(format!(
        "fine-tuned {} steps (seed {}); best dev ROUGE-L {best_dev_rouge_l:.6} at step {best_step}",
        config.total_steps, config.seed
    ));
    let provenance = Provenance {
        mode: ProvenanceMode::Trained,
        source_hash: Some(ckpt.hash()),
        seed: Some(config.seed),
        notes,
    };
    let best_model = EncoderDecoderModel {
        weights,
        ..model
    };
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint::new(best_model, ckpt.vocab_ref.clone(), provenance),
        best_step,
        best_dev_rouge_l,
        final_train_loss,
        metrics,
    })
}

/// True when `id` is never a legitimate MLM target.
pub fn is_unmaskable(id: u32) -> bool {
    id == PAD || Vocabulary::is_special(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_weights(x: f64) -> Weights {
        let mut w = Weights::new();
        w.insert("p".into(), Tensor::new(vec![1], vec![x]).unwrap());
        w
    }

    fn grads(g: &[f64]) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("p".to_string(), g.to_vec())])
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut w = scalar_weights(0.5);
        let mut st = OptimizerState::new(&w);
        let cfg = TrainConfig {
            gradient_clip_norm: None,
            ..TrainConfig::default()
        };
        adam_step(&mut w, &grads(&[1.0]), &mut st, &cfg, 0.1).unwrap();
        let delta = w["p"].data()[0] - 0.5;
        assert!((delta + 0.1).abs() < 1e-8, "{delta}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = scalar_weights(0.5);
        let mut st = OptimizerState::new(&w);
        adam_step(&mut w, &grads(&[0.0]), &mut st, &TrainConfig::default(), 0.1).unwrap();
        assert_eq!(w["p"].data()[0], 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn clipping_halves_gradient_before_moments() {
        let mut w = Weights::new();
        w.insert("p".into(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut st = OptimizerState::new(&w);
        let cfg = TrainConfig {
            gradient_clip_norm: Some(0.5),
            ..TrainConfig::default()
        };
        let g = grads(&[0.6, 0.8]);
        let r = adam_step(&mut w, &g, &mut st, &cfg, 0.1).unwrap();
        assert!(r.clipped);
        assert!((r.grad_norm - 1.0).abs() < 1e-12);
        // m after one step = (1 - beta1) * clipped g
        assert!((st.m["p"][0] - 0.1 * 0.3).abs() < 1e-12);
        assert!((st.m["p"][1] - 0.1 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut w = scalar_weights(0.5);
        let mut st = OptimizerState::new(&w);
        let err = adam_step(&mut w, &grads(&[f64::NAN]), &mut st, &TrainConfig::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert!(err.is_numeric());
        assert_eq!(w["p"].data()[0], 0.5);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            total_steps: 12,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.25);
        assert_eq!(cfg.learning_rate_at(3), 1.0);
        assert_eq!(cfg.learning_rate_at(4), 1.0);
        assert_eq!(cfg.learning_rate_at(8), 0.5);
        assert_eq!(cfg.learning_rate_at(12), 0.0);
    }

    #[test]
    fn truncation_keeps_ends() {
        let ids = [BOS, 10, 11, 12, 13, EOS];
        assert_eq!(truncate_ids(&ids, 4, Truncation::Head), vec![BOS, 10, 11, EOS]);
        assert_eq!(truncate_ids(&ids, 4, Truncation::Tail), vec![BOS, 12, 13, EOS]);
        assert_eq!(truncate_ids(&ids, 10, Truncation::Head), ids.to_vec());
    }

    #[test]
    fn mask_fraction_and_bookkeeping() {
        let mut rng = SplitMix64::new(3);
        let ids: Vec<u32> = (0..20_000).map(|i| if i % 10 == 0 { PAD } else { 5 + (i % 30) as u32 }).collect();
        let m = mask_tokens(&ids, 40, 0.15, &mut rng);
        let eligible = ids.iter().filter(|&&t| !is_unmaskable(t)).count();
        let frac = m.positions.len() as f64 / eligible as f64;
        assert!((frac - 0.15).abs() < 0.02, "{frac}");
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(ids[p], t);
            assert!(!is_unmaskable(t));
        }
        let masked = m.positions.iter().filter(|&&p| m.inputs[p] == MASK).count() as f64;
        assert!((masked / m.positions.len() as f64 - 0.8).abs() < 0.03);
        for i in 0..ids.len() {
            if !m.positions.contains(&i) {
                assert_eq!(m.inputs[i], ids[i]);
            }
        }
    }

    #[test]
    fn at_least_one_position_masked() {
        let mut rng = SplitMix64::new(0);
        let m = mask_tokens(&[BOS, 7, EOS], 10, 1e-9, &mut rng);
        assert_eq!(m.positions, vec![1]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            mlm_mask_prob: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero_lr.validate().is_ok());
    }
}
