use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which tensor the second add-and-norm adds back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FfnResidual {
    /// `LayerNorm(Linear(b) + b)` with `b` the feed-forward output.
    #[default]
    AsPrinted,
    /// `LayerNorm(Linear(b) + o)` with `o` the feed-forward input.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mem_len: usize,
    pub segment_len: usize,
    /// on2on, on2off, pitch, velocity
    pub vocab_sizes: [usize; 4],
    pub ffn_residual: FfnResidual,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            head_dim: 64,
            d_model: 512,
            d_ff: 2048,
            dropout: 0.1,
            mem_len: 1024,
            segment_len: 512,
            vocab_sizes: [3841, 3841, 128, 128],
            ffn_residual: FfnResidual::AsPrinted,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            head_dim: 32,
            d_model: 64,
            d_ff: 256,
            dropout: 0.0,
            mem_len: 64,
            segment_len: 64,
            ..Self::default()
        }
    }

    /// Tiny configuration for tests; `d_ff` follows the 4×d convention.
    pub fn tiny(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            head_dim: (d_model / n_heads).max(1),
            d_model,
            d_ff: 4 * d_model,
            dropout: 0.0,
            mem_len: 8,
            segment_len: 8,
            ..Self::default()
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return err(format!("d_model {} must be even and positive", self.d_model));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.d_ff == 0 {
            return err("n_layers, n_heads, head_dim and d_ff must be positive".into());
        }
        if self.segment_len == 0 {
            return err("segment_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_sizes.iter().any(|&v| v == 0) {
            return err("vocabulary sizes must be positive".into());
        }
        if !(self.init_std >= 0.0) {
            return err(format!("init_std {}", self.init_std));
        }
        Ok(())
    }
}
