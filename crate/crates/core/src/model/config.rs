use crate::error::{Error, Result};

/// Shape and regularization of the encoder–decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Total token ids, reserved ids included.
    pub vocab_size: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    /// Longest source or target sentence accepted.
    pub max_positions: usize,
    /// Size of the length classifier; bin `i` means length `i`.
    pub max_length_bins: usize,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 64-wide model, 256-wide feed-forward, two
    /// encoder and two decoder layers, four heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            model_dim: 64,
            hidden_dim: 256,
            layers_enc: 2,
            layers_dec: 2,
            heads: 4,
            max_positions: 64,
            max_length_bins: 65,
            dropout_rate: 0.1,
            seed: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("hidden_dim", self.hidden_dim),
            ("layers_enc", self.layers_enc),
            ("layers_dec", self.layers_dec),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
            ("max_length_bins", self.max_length_bins),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size <= crate::data::NUM_RESERVED {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.max_length_bins < 2 {
            return Err(Error::InvalidConfig(
                "max_length_bins must be at least 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Rejects length bins too small for the longest target seen in training.
    pub fn check_target_length(&self, longest_target: usize) -> Result<()> {
        if self.max_length_bins < longest_target + 1 {
            return Err(Error::InvalidConfig(format!(
                "max_length_bins {} cannot represent target length {longest_target}",
                self.max_length_bins
            )));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    ///
    /// Token embeddings (shared with the output projection), encoder and
    /// decoder position tables, per-layer attention blocks of four `d×d`
    /// projections with biases, layer norms, two-layer feed-forward blocks,
    /// final norms, the length head and the output bias.
    pub fn parameter_count(&self) -> usize {
        let (v, d, h, p) = (
            self.vocab_size,
            self.model_dim,
            self.hidden_dim,
            self.max_positions,
        );
        let attention = 4 * d * d + 4 * d;
        let norm = 2 * d;
        let ffn = d * h + h + h * d + d;
        let embeddings = v * d + (p + 1) * d + p * d;
        let encoder = self.layers_enc * (attention + ffn + 2 * norm) + norm;
        let decoder = self.layers_dec * (2 * attention + ffn + 3 * norm) + norm;
        let length_head = d * self.max_length_bins + self.max_length_bins;
        embeddings + encoder + decoder + length_head + v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_is_valid() {
        ModelConfig::desk(68).validate().unwrap();
    }

    #[test]
    fn rejects_bad_fields() {
        let base = ModelConfig::desk(68);
        for bad in [
            ModelConfig { heads: 5, ..base },
            ModelConfig {
                model_dim: 0,
                ..base
            },
            ModelConfig {
                vocab_size: 4,
                ..base
            },
            ModelConfig {
                dropout_rate: 1.0,
                ..base
            },
            ModelConfig {
                max_length_bins: 1,
                ..base
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(base.check_target_length(64).is_ok());
        assert!(base.check_target_length(65).is_err());
    }
}
