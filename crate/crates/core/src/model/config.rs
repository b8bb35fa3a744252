use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    /// tanh approximation
    Gelu,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Gelu => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Learned,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    PreLn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStyle {
    /// `a = h + attn(ln1(h)); out = a + ff(ln2(a))`
    Sequential,
    /// `out = h + attn(ln1(h)) + ff(ln2(h))`
    Parallel,
}

/// Architecture hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub nonlinearity: Nonlinearity,
    pub position_encoding: PositionEncoding,
    pub norm_placement: NormPlacement,
    pub residual_style: ResidualStyle,
}

impl ModelConfig {
    /// A pre-LN, sequential-residual, ReLU config with `d_ff = 4 · d_model`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        vocab_size: usize,
        n_heads: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            n_heads,
            max_seq_len,
            nonlinearity: Nonlinearity::Relu,
            position_encoding: PositionEncoding::Learned,
            norm_placement: NormPlacement::PreLn,
            residual_style: ResidualStyle::Sequential,
        }
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn with_nonlinearity(mut self, f: Nonlinearity) -> Self {
        self.nonlinearity = f;
        self
    }

    pub fn with_position_encoding(mut self, p: PositionEncoding) -> Self {
        self.position_encoding = p;
        self
    }

    pub fn with_residual_style(mut self, r: ResidualStyle) -> Self {
        self.residual_style = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of FF keys across all layers.
    pub fn total_keys(&self) -> usize {
        self.n_layers * self.d_ff
    }
}
