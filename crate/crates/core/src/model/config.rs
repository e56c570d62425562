use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How each decoder layer wires its residual connections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualVariant {
    /// `ĥ = h + ATTN(LN(h))`, `h' = ĥ + FFN(LN(ĥ))`.
    PreLn,
    /// Pre-LN with dropout on both branch outputs. Dropout is only active
    /// in training-mode forwards.
    ResidualDropout { p: f64 },
    /// Pre-LN with an extra norm after each branch output.
    SandwichLn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rmsnorm,
    Layernorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Positional {
    Rope { theta: f64 },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    #[serde(default = "default_top_t")]
    pub top_t: usize,
    /// 1-based indices of the layers whose FFN is a mixture of experts.
    pub layers: Vec<usize>,
}

fn default_top_t() -> usize {
    2
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_activation() -> String {
    "silu".to_string()
}

/// Architecture hyperparameters of a decoder-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Key/value heads; `None` means plain multi-head attention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_kv_heads: Option<usize>,
    pub residual: ResidualVariant,
    pub norm: NormKind,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    pub positional: Positional,
    pub bos_token_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    #[serde(default = "default_activation")]
    pub activation: String,
}

impl ModelConfig {
    /// A small dense pre-LN model with RMSNorm and RoPE.
    pub fn toy(vocab_size: usize, hidden_dim: usize, ffn_dim: usize, num_layers: usize, num_heads: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim,
            ffn_dim,
            num_layers,
            num_heads,
            head_dim: hidden_dim / num_heads,
            num_kv_heads: None,
            residual: ResidualVariant::PreLn,
            norm: NormKind::Rmsnorm,
            norm_eps: default_norm_eps(),
            positional: Positional::Rope { theta: 10_000.0 },
            bos_token_id: (vocab_size - 1) as u32,
            moe: None,
            activation: default_activation(),
        }
    }

    pub fn kv_heads(&self) -> usize {
        self.num_kv_heads.unwrap_or(self.num_heads)
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads() * self.head_dim
    }

    /// Whether 1-based `layer` uses a mixture-of-experts FFN.
    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe.as_ref().is_some_and(|m| m.layers.contains(&layer))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.num_layers == 0 {
            return fail("vocab_size, hidden_dim, ffn_dim and num_layers must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_dim != self.num_heads * self.head_dim {
            return fail(format!(
                "hidden_dim {} must equal num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            ));
        }
        let kv = self.kv_heads();
        if kv == 0 || !self.num_heads.is_multiple_of(kv) {
            return fail(format!("num_kv_heads {kv} must divide num_heads {}", self.num_heads));
        }
        if self.bos_token_id as usize >= self.vocab_size {
            return fail(format!(
                "bos_token_id {} must be below vocab_size {}",
                self.bos_token_id, self.vocab_size
            ));
        }
        if !(self.norm_eps > 0.0) {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if let ResidualVariant::ResidualDropout { p } = self.residual {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("residual dropout p must be in [0, 1), got {p}"));
            }
        }
        if let Positional::Rope { theta } = self.positional {
            if !(theta > 0.0) || !self.head_dim.is_multiple_of(2) {
                return fail("rope needs theta > 0 and an even head_dim".into());
            }
        }
        if self.activation != "silu" {
            return fail(format!("unsupported activation `{}`", self.activation));
        }
        if let Some(moe) = &self.moe {
            if moe.num_experts < 2 {
                return fail(format!("moe needs at least 2 experts, got {}", moe.num_experts));
            }
            if moe.top_t != 2 {
                return fail(format!("only top-2 routing is supported, got top_t {}", moe.top_t));
            }
            if let Some(&bad) = moe.layers.iter().find(|&&l| l == 0 || l > self.num_layers) {
                return fail(format!("moe layer {bad} outside [1, {}]", self.num_layers));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
