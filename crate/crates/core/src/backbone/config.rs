use serde::{Deserialize, Serialize};

use crate::diffusion::Vocabulary;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: Vocabulary,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub max_position: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    pub fn new(vocab: Vocabulary, d_model: usize, n_heads: usize, n_layers: usize, d_ff: usize, max_position: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab,
            rope_base: default_rope_base(),
            max_position,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(invalid("rotary encoding needs an even head dimension"));
        }
        if self.max_position == 0 {
            return Err(invalid("max_position must be positive"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(invalid("rope_base must be a finite number above 1"));
        }
        Ok(())
    }
}
