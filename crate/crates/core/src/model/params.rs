//! Canonical parameter names, shapes, and fresh initialization.
//!
//! Weight matrices are stored input-major (`x · W`), so a projection from
//! `d_in` to `d_out` has shape `[d_in, d_out]`. Embedding tables and the
//! untied output projection are `[rows, d_model]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Standard deviation of freshly initialized matrices (before truncation at 2 std).
pub const INIT_STD: f64 = 0.02;

pub type Weights = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder plus masked-LM head.
    Encoder,
    /// Encoder-decoder.
    Seq2Seq,
}

pub const ATTN_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

fn attn_shapes(out: &mut BTreeMap<String, Vec<usize>>, prefix: &str, d: usize) {
    for p in ATTN_PROJECTIONS {
        out.insert(format!("{prefix}.{p}.weight"), vec![d, d]);
        out.insert(format!("{prefix}.{p}.bias"), vec![d]);
    }
}

fn norm_shapes(out: &mut BTreeMap<String, Vec<usize>>, prefix: &str, d: usize) {
    out.insert(format!("{prefix}.gain"), vec![d]);
    out.insert(format!("{prefix}.bias"), vec![d]);
}

fn ffn_shapes(out: &mut BTreeMap<String, Vec<usize>>, prefix: &str, d: usize, ff: usize) {
    out.insert(format!("{prefix}.in.weight"), vec![d, ff]);
    out.insert(format!("{prefix}.in.bias"), vec![ff]);
    out.insert(format!("{prefix}.out.weight"), vec![ff, d]);
    out.insert(format!("{prefix}.out.bias"), vec![d]);
}

/// Every parameter a model of this config and kind owns, with its shape.
pub fn expected_shapes(config: &ModelConfig, kind: ModelKind) -> BTreeMap<String, Vec<usize>> {
    let (v, d, ff, p) = (config.vocab_size, config.d_model, config.d_ff, config.max_positions);
    let mut out = BTreeMap::new();
    out.insert("encoder.embed.token".into(), vec![v, d]);
    out.insert("encoder.embed.position".into(), vec![p, d]);
    if config.use_segment_embeddings {
        out.insert("encoder.embed.segment".into(), vec![2, d]);
    }
    norm_shapes(&mut out, "encoder.embed.ln", d);
    for i in 0..config.n_enc_layers {
        let l = format!("encoder.layer.{i}");
        attn_shapes(&mut out, &format!("{l}.self_attn"), d);
        norm_shapes(&mut out, &format!("{l}.ln_attn"), d);
        ffn_shapes(&mut out, &format!("{l}.ffn"), d, ff);
        norm_shapes(&mut out, &format!("{l}.ln_ffn"), d);
    }
    match kind {
        ModelKind::Encoder => {
            out.insert("mlm.transform.weight".into(), vec![d, d]);
            out.insert("mlm.transform.bias".into(), vec![d]);
            norm_shapes(&mut out, "mlm.ln", d);
            out.insert("mlm.output_bias".into(), vec![v]);
        }
        ModelKind::Seq2Seq => {
            out.insert("decoder.embed.token".into(), vec![v, d]);
            out.insert("decoder.embed.position".into(), vec![p, d]);
            norm_shapes(&mut out, "decoder.embed.ln", d);
            for i in 0..config.n_dec_layers {
                let l = format!("decoder.layer.{i}");
                attn_shapes(&mut out, &format!("{l}.self_attn"), d);
                norm_shapes(&mut out, &format!("{l}.ln_self"), d);
                attn_shapes(&mut out, &format!("{l}.cross_attn"), d);
                norm_shapes(&mut out, &format!("{l}.cross_attn.ln"), d);
                ffn_shapes(&mut out, &format!("{l}.ffn"), d, ff);
                norm_shapes(&mut out, &format!("{l}.ln_ffn"), d);
            }
            if !config.tie_decoder_embeddings {
                out.insert("decoder.output_proj.weight".into(), vec![v, d]);
            }
        }
    }
    out
}

/// Name of the tensor that serves as the decoder output projection.
pub fn output_projection_name(config: &ModelConfig) -> &'static str {
    if config.tie_decoder_embeddings {
        "decoder.embed.token"
    } else {
        "decoder.output_proj.weight"
    }
}

/// Norm gains start at 1, biases at 0, everything else truncated normal.
pub fn init_tensor(name: &str, shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    if name.ends_with(".gain") {
        Tensor::full(shape, 1.0)
    } else if name.ends_with(".bias") || name.ends_with("output_bias") {
        Tensor::zeros(shape)
    } else {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

pub fn is_norm_or_bias(name: &str) -> bool {
    name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with("output_bias")
}

/// Fresh weights for every expected parameter, drawn in name order.
pub fn init_weights(config: &ModelConfig, kind: ModelKind, seed: u64) -> Weights {
    let mut rng = SplitMix64::new(seed);
    expected_shapes(config, kind)
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, &mut rng);
            (name, t)
        })
        .collect()
}
