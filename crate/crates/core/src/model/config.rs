use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout (GPT-2 convention).
pub const LN_EPS: f64 = 1e-5;

/// Shape of a backbone transformer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub tie_lm_head: bool,
}

impl ModelConfig {
    /// The desk-scale default: 4 layers, 4 heads, width 128, 256 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size,
            max_positions: 256,
            tie_lm_head: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Feed-forward inner width.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter count as a pure function of the configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = self.vocab_size * d + self.max_positions * d;
        let head = if self.tie_lm_head { 0 } else { self.vocab_size * d };
        embeddings + self.n_layers * block_parameter_count(d, self.d_ff()) + 2 * d + head
    }

    /// Ordered `key=value` pairs, as stored in checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("model.n_layers", self.n_layers.to_string()),
            ("model.n_heads", self.n_heads.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.vocab_size", self.vocab_size.to_string()),
            ("model.max_positions", self.max_positions.to_string()),
            ("model.tie_lm_head", self.tie_lm_head.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header key {key} is not an integer")))
        };
        let cfg = Self {
            n_layers: int("model.n_layers")?,
            n_heads: int("model.n_heads")?,
            d_model: int("model.d_model")?,
            vocab_size: int("model.vocab_size")?,
            max_positions: int("model.max_positions")?,
            tie_lm_head: get("model.tie_lm_head")?
                .parse()
                .map_err(|_| Error::Checkpoint("model.tie_lm_head is not a bool".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn block_parameter_count(d: usize, d_ff: usize) -> usize {
    let ln = 2 * d;
    let attn = d * 3 * d + 3 * d + d * d + d;
    let mlp = d * d_ff + d_ff + d_ff * d + d;
    2 * ln + attn + mlp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::desk(100);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pairs_round_trip() {
        let c = ModelConfig::desk(321);
        assert_eq!(ModelConfig::from_pairs(&c.to_pairs()).unwrap(), c);
    }
}
