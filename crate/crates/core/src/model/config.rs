use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where normalization sits in each residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `h + F(norm(h))`
    PreNorm,
    /// `h + norm₂(F(norm₁(h)))`
    Sandwich,
    /// Attention blocks take the raw stream and normalize only per-head
    /// queries and keys; feed-forward blocks stay pre-norm.
    SandwichQk,
    /// Pre-norm placement with `γ ⊙ tanh(α·h) + β` instead of RMSNorm.
    DynamicTanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Swiglu,
    /// Two-layer `W_down · GeLU(W_up h)`.
    Gelu2,
    /// One `d_model × d_model` linear map.
    Linear,
    /// Every feed-forward block is replaced by another attention block.
    AttentionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    None,
    CondChannel,
    CondHead,
    CondSingle,
    UncondChannel,
    UncondHead,
    UncondSingle,
    StaticPositional,
    StaticToken,
}

/// Output granularity of an attention gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateWidth {
    Channel,
    Head,
    Single,
}

impl GateKind {
    pub fn width(self) -> Option<GateWidth> {
        use GateKind::*;
        match self {
            None => Option::None,
            CondChannel | UncondChannel | StaticPositional | StaticToken => Some(GateWidth::Channel),
            CondHead | UncondHead => Some(GateWidth::Head),
            CondSingle | UncondSingle => Some(GateWidth::Single),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Attention,
    FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub ffn_kind: FfnKind,
    #[serde(default = "default_gate")]
    pub gate_kind: GateKind,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_gate() -> GateKind {
    GateKind::None
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl Default for ModelConfig {
    /// The desk-scale baseline: 4 layers (8 blocks), width 128, 8 heads of 16.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 8,
            d_head: 16,
            d_ffn: 344,
            vocab_size: 256,
            max_seq: 64,
            norm_kind: NormKind::PreNorm,
            ffn_kind: FfnKind::Swiglu,
            gate_kind: GateKind::None,
            rope_base: default_rope_base(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "model.d_head must be even for rotary embeddings, got {}",
                self.d_head
            )));
        }
        if matches!(self.ffn_kind, FfnKind::Swiglu | FfnKind::Gelu2) && self.d_ffn == 0 {
            return Err(Error::Config("model.d_ffn must be positive".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("model.rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        2 * self.n_layers
    }

    /// Attention width `n_heads · d_head`.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Kind of block `i` (1-based): odd blocks attend, even blocks are
    /// feed-forward unless `ffn_kind` is `attention_only`.
    pub fn block_kind(&self, i: usize) -> BlockKind {
        if i % 2 == 1 || self.ffn_kind == FfnKind::AttentionOnly {
            BlockKind::Attention
        } else {
            BlockKind::FeedForward
        }
    }

    pub fn gate_cols(&self) -> usize {
        match self.gate_kind.width() {
            None => 0,
            Some(GateWidth::Channel) => self.attn_width(),
            Some(GateWidth::Head) => self.n_heads,
            Some(GateWidth::Single) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_head_width_is_rejected() {
        let cfg = ModelConfig {
            d_head: 15,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn block_alternation() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.block_kind(1), BlockKind::Attention);
        assert_eq!(cfg.block_kind(2), BlockKind::FeedForward);
        let only = ModelConfig {
            ffn_kind: FfnKind::AttentionOnly,
            ..cfg
        };
        assert!((1..=8).all(|i| only.block_kind(i) == BlockKind::Attention));
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let text = r#"
            n_layers = 1
            d_model = 8
            n_heads = 2
            d_head = 4
            d_ffn = 16
            vocab_size = 256
            max_seq = 8
            norm_kind = "pre_norm"
            ffn_kind = "swiglu"
            norm_knd = "sandwich"
        "#;
        assert!(toml::from_str::<ModelConfig>(text).is_err());
    }
}
