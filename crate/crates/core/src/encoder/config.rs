use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a BERT-style encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    /// Feed-forward width; `4 × hidden` unless set explicitly.
    pub intermediate: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_position")]
    pub max_position: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_max_position() -> usize {
    512
}

fn default_type_vocab() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.1
}

/// Scalar parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Token, position and segment tables plus their layer norm. The tied
    /// MLM output projection lives here.
    pub embeddings: usize,
    pub encoder: usize,
    pub pooler: usize,
    /// MLM transform, its layer norm and the vocabulary bias.
    pub mlm_head: usize,
}

impl ParamBreakdown {
    /// Embeddings plus encoder stack; the figure model-size tables report.
    pub fn backbone(&self) -> usize {
        self.embeddings + self.encoder
    }

    pub fn total(&self) -> usize {
        self.embeddings + self.encoder + self.pooler + self.mlm_head
    }
}

impl ModelConfig {
    /// `intermediate = 4 × hidden`, `max_position = 512`, dropout 0.1.
    pub fn new(num_layers: usize, hidden: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            hidden,
            num_heads,
            intermediate: 4 * hidden,
            vocab_size,
            max_position: default_max_position(),
            type_vocab: default_type_vocab(),
            dropout: default_dropout(),
        }
    }

    pub fn with_max_position(mut self, max_position: usize) -> Self {
        self.max_position = max_position;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("intermediate", self.intermediate),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
            ("type_vocab", self.type_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter counts.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let (h, i, v) = (self.hidden, self.intermediate, self.vocab_size);
        let embeddings = v * h + self.max_position * h + self.type_vocab * h + 2 * h;
        let attention = 4 * (h * h + h) + 2 * h;
        let feed_forward = h * i + i + i * h + h + 2 * h;
        ParamBreakdown {
            embeddings,
            encoder: self.num_layers * (attention + feed_forward),
            pooler: h * h + h,
            mlm_head: h * h + h + 2 * h + v,
        }
    }

    pub fn count_params(&self) -> usize {
        self.param_breakdown().backbone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(
            ModelConfig::new(12, 770, 12, 100).validate(),
            Err(Error::Config(_))
        ));
        assert!(ModelConfig::new(12, 768, 12, 100).validate().is_ok());
    }

    #[test]
    fn encoder_params_linear_in_layers() {
        let a = ModelConfig::new(3, 32, 4, 50).param_breakdown();
        let b = ModelConfig::new(6, 32, 4, 50).param_breakdown();
        assert_eq!(b.encoder, 2 * a.encoder);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn serde_defaults_fill_optional_fields() {
        let c: ModelConfig =
            toml::from_str("num_layers = 2\nhidden = 16\nnum_heads = 2\nintermediate = 64\nvocab_size = 30\n").unwrap();
        assert_eq!(c.max_position, 512);
        assert_eq!(c.type_vocab, 2);
    }
}
