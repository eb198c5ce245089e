use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            d_ffn: 344,
            n_heads: 4,
            vocab_size: 120,
            max_seq_len: 64,
            rms_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return fail("n_layers, d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ffn < self.d_model {
            return fail(format!("d_ffn {} < d_model {}", self.d_ffn, self.d_model));
        }
        if self.vocab_size < 2 || self.max_seq_len < 2 {
            return fail("vocab_size and max_seq_len must be at least 2".into());
        }
        if !(self.rms_eps > 0.0) {
            return fail(format!("rms_eps must be positive, got {}", self.rms_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of FFN neurons: `n_layers * (2 * d_ffn + d_model)`.
    pub fn neuron_count(&self) -> usize {
        self.n_layers * (2 * self.d_ffn + self.d_model)
    }
}
