use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            mlp_hidden: 512,
            context: 128,
            vocab_size: 0,
        }
    }
}

impl TransformerConfig {
    pub fn with_vocab(self, vocab_size: usize) -> Self {
        TransformerConfig { vocab_size, ..self }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("context", self.context),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, h, v) = (self.d_model, self.mlp_hidden, self.vocab_size);
        let per_layer = 4 * d + 3 * d * d + d * d + h * d + d * h;
        v * d + self.context * d + self.layers * per_layer + 2 * d + v * d
    }
}
