use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a toy decoder-only transformer with grouped-query attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub base_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 1,
            head_dim: 16,
            d_ff: 128,
            vocab_size: 128,
            max_seq: 128,
            base_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "head_dim must be even for rotary embeddings".into(),
            ));
        }
        if self.max_seq < 2 {
            return Err(Error::InvalidConfig("max_seq must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of one position's key (or value) row across all KV heads.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Stored bytes of one layer's K and V for one position (f32).
    pub fn kv_bytes_per_position(&self) -> usize {
        2 * self.n_kv_heads * self.head_dim * 4
    }

    /// Stored bytes of one layer's E cache for one position (f32).
    pub fn e_bytes_per_position(&self) -> usize {
        self.d_model * 4
    }
}

/// Per-layer noise magnitudes turning the base model into a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub eps: Vec<f32>,
    pub noise_seed: u64,
}

impl PerturbationSpec {
    pub fn zeros(n_layers: usize, noise_seed: u64) -> Self {
        PerturbationSpec {
            eps: vec![0.0; n_layers],
            noise_seed,
        }
    }

    /// Noise of magnitude `eps` on the given layers, zero elsewhere.
    pub fn on_layers(n_layers: usize, layers: &[usize], eps: f32, noise_seed: u64) -> Self {
        let mut spec = Self::zeros(n_layers, noise_seed);
        for &layer in layers {
            if layer < n_layers {
                spec.eps[layer] = eps;
            }
        }
        spec
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.eps.len() != n_layers {
            return Err(Error::DimensionMismatch {
                expected: n_layers,
                got: self.eps.len(),
            });
        }
        if let Some(bad) = self.eps.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation magnitudes must be finite and non-negative, got {bad}"
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.eps.iter().all(|e| *e == 0.0)
    }
}

/// Token ids of one shared context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks the sequence can be prefilled by a model with `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "need at least 2 tokens, got {}",
                self.len()
            )));
        }
        if self.len() > config.max_seq {
            return Err(Error::SequenceTooLong {
                len: self.len(),
                max_seq: config.max_seq,
            });
        }
        for (position, &id) in self.0.iter().enumerate() {
            if id as usize >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    position,
                    vocab_size: config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        TokenSequence(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_gqa() {
        let config = ModelConfig::default();
        config.validate().unwrap();
        assert_eq!(config.group_size(), 4);
    }

    #[test]
    fn rejects_head_mismatch() {
        let config = ModelConfig {
            d_model: 60,
            ..ModelConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::InvalidConfig(_))));
        let config = ModelConfig {
            n_kv_heads: 3,
            ..ModelConfig::default()
        };
        assert!(config.validate().is_err());
        let config = ModelConfig {
            max_seq: 1,
            ..ModelConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn token_validation() {
        let config = ModelConfig::default();
        assert!(matches!(
            TokenSequence::new(vec![1]).validate(&config),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            TokenSequence::new(vec![1; 129]).validate(&config),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(matches!(
            TokenSequence::new(vec![1, 500]).validate(&config),
            Err(Error::TokenOutOfRange { position: 1, .. })
        ));
    }

    #[test]
    fn perturbation_length_checked() {
        let spec = PerturbationSpec::zeros(4, 1);
        assert!(matches!(
            spec.validate(8),
            Err(Error::DimensionMismatch { expected: 8, got: 4 })
        ));
        let mut spec = PerturbationSpec::zeros(8, 1);
        spec.eps[2] = -1.0;
        assert!(spec.validate(8).is_err());
    }
}
