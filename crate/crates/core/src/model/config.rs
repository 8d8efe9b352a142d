use serde::{Deserialize, Serialize};

use crate::tensor::Activation;

/// Residual sublayers use post-norm: `x = LayerNorm(x + sublayer(x))`.
pub const NORM_PLACEMENT: &str = "post";

/// Additive attention mask value for disallowed positions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_positions: usize,
    pub dropout: f64,
    #[serde(default)]
    pub use_segment_embeddings: bool,
    #[serde(default = "yes")]
    pub tie_decoder_embeddings: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn yes() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-12
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_positions: 64,
            dropout: 0.1,
            use_segment_embeddings: false,
            tie_decoder_embeddings: true,
            activation: Activation::Gelu,
            layer_norm_eps: default_eps(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}
