use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    #[default]
    LearnedAbsolute,
}

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Width of the MLP hidden layer, `4 · hidden_dim` unless overridden.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Maximum context length; also the number of learned position rows.
    pub seq_len: usize,
    #[serde(default)]
    pub positional_encoding: PositionalEncoding,
}

impl ModelConfig {
    /// Config with `ffn_dim = 4d` and `head_dim = d / h`.
    pub fn new(
        num_layers: usize,
        hidden_dim: usize,
        num_heads: usize,
        vocab_size: usize,
        seq_len: usize,
    ) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads,
            head_dim: if num_heads == 0 { 0 } else { hidden_dim / num_heads },
            ffn_dim: 4 * hidden_dim,
            vocab_size,
            seq_len,
            positional_encoding: PositionalEncoding::LearnedAbsolute,
        }
    }

    /// The 1.3B GPT-3 XL shaped configuration used for the analytic models:
    /// 24 layers, d = 2048, 16 heads of 128, 32k vocabulary, 1024 tokens.
    pub fn gpt3_xl() -> Self {
        Self::new(24, 2048, 16, 32_000, 1024)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be at least 1"));
            }
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::config(
                "model.hidden_dim",
                format!(
                    "hidden_dim must equal num_heads * head_dim ({} != {} * {})",
                    self.hidden_dim, self.num_heads, self.head_dim
                ),
            ));
        }
        Ok(())
    }

    /// Width of the concatenated attention heads, `h · d_h`.
    pub fn attn_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}
