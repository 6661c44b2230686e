use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and regularization settings of the transformer encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Standard deviation of the normal initializer for weight matrices and embeddings.
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Laptop-scale default: 4 layers, width 128, 4 heads.
    pub fn desk_default(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 128,
            num_heads: 4,
            d_ff: 256,
            num_layers: 4,
            max_seq_len: 64,
            dropout_rate: 0.1,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }

    /// Smallest useful shape, for gradient checks and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            num_layers: 2,
            max_seq_len: 12,
            dropout_rate: 0.0,
            init_std: 0.5,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("num_layers", self.num_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2 (CLS + one token)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.vocab_size < crate::encoder::vocab::NUM_SPECIAL as usize {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        Ok(())
    }
}
