use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textnum::NumberScheme;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub scheme: NumberScheme,
    /// Hidden layers of the MLP number encoder.
    pub num_encoder_depth: usize,
    /// Linear layers of the number head.
    pub num_head_depth: usize,
    pub routing_enabled: bool,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: width 64, 4 heads, 4+4 layers.
    pub fn desk(scheme: NumberScheme, vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 4,
            ffn_mult: 4,
            vocab_size,
            scheme,
            num_encoder_depth: 1,
            num_head_depth: scheme.default_head_depth(),
            routing_enabled: scheme.number_aware(),
            max_seq_len: 256,
        }
    }

    /// Full-size configuration: width 512, 8 heads, 4+4 layers. The
    /// feed-forward width is unpublished; with untied input/output embeddings
    /// a 45M budget leaves room for `d_ffn = d_model`.
    pub fn full(scheme: NumberScheme, vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            ffn_mult: 1,
            max_seq_len: 512,
            ..ModelConfig::desk(scheme, vocab_size)
        }
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.routing_enabled != self.scheme.number_aware() {
            return Err(Error::Config(format!(
                "routing must be {} for scheme {}",
                if self.scheme.number_aware() { "enabled" } else { "disabled" },
                self.scheme
            )));
        }
        if !(1..=3).contains(&self.num_head_depth) {
            return Err(Error::Config("num_head_depth must be 1, 2 or 3".into()));
        }
        if self.num_encoder_depth == 0 {
            return Err(Error::Config("num_encoder_depth must be >= 1".into()));
        }
        if self.vocab_size < crate::textnum::RESERVED.len() || self.ffn_mult == 0 || self.d_model == 0 {
            return Err(Error::Config("vocab_size, d_model and ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form parameter count for `cfg`, independent of any initialized model.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ffn();
    let v = cfg.vocab_size;
    let linear = |i: usize, o: usize| i * o + o;
    let ln = 2 * d;
    let attn = 4 * linear(d, d);
    let ffn = linear(d, f) + linear(f, d);

    let embed = v * d;
    let enc = cfg.n_enc_layers * (2 * ln + attn + ffn) + ln;
    let dec = cfg.n_dec_layers * (3 * ln + 2 * attn + ffn) + ln;
    let heads = linear(d, v) + linear(d, 2) + (cfg.num_head_depth - 1) * linear(d, d) + linear(d, 1);
    let num_enc = if cfg.scheme.uses_mlp_encoder() {
        linear(1, d) + (cfg.num_encoder_depth - 1) * linear(d, d) + linear(d, d)
    } else {
        0
    };
    embed + enc + dec + heads + num_enc
}
