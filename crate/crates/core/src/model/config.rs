use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary slots reserved above the data alphabet for learnable sink tokens.
pub const RESERVED_SINK_SLOTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    Rope,
    Alibi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AttnVariant {
    /// Standard softmax over the attended keys.
    Softmax,
    /// Softmax with an implicit zero logit; scores may sum to less than one.
    Softmax1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Data alphabet plus [`RESERVED_SINK_SLOTS`].
    pub vocab_size: usize,
    /// Sequence length seen during training.
    pub train_window: usize,
    pub pos_kind: PosKind,
    pub attn_variant: AttnVariant,
    pub n_sink_tokens: usize,
    pub rope_base: f64,
    pub seed: u64,
    /// Recorded so checkpoints are self-describing; both are fixed.
    pub tied_embeddings: bool,
    pub biases: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 256,
            vocab_size: 256 + RESERVED_SINK_SLOTS,
            train_window: 64,
            pos_kind: PosKind::Rope,
            attn_variant: AttnVariant::Softmax,
            n_sink_tokens: 0,
            rope_base: 10_000.0,
            seed: 0,
            tied_embeddings: false,
            biases: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.pos_kind == PosKind::Rope && self.d_head % 2 != 0 {
            return fail(format!("RoPE needs an even head width, got {}", self.d_head));
        }
        if self.vocab_size <= RESERVED_SINK_SLOTS {
            return fail(format!("vocab_size {} leaves no data alphabet", self.vocab_size));
        }
        if self.vocab_size > 1 << 16 {
            return fail(format!("vocab_size {} exceeds 16-bit token storage", self.vocab_size));
        }
        if self.n_sink_tokens > RESERVED_SINK_SLOTS {
            return fail(format!(
                "at most {RESERVED_SINK_SLOTS} sink tokens, got {}",
                self.n_sink_tokens
            ));
        }
        if self.train_window <= self.n_sink_tokens {
            return fail("train window must exceed the sink-token count".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return fail(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.tied_embeddings || self.biases {
            return fail("tied embeddings and biases are not supported".into());
        }
        Ok(())
    }

    /// Size of the data alphabet (token ids below the reserved sink slots).
    #[inline]
    pub fn data_vocab(&self) -> usize {
        self.vocab_size - RESERVED_SINK_SLOTS
    }

    /// Token id of the `i`-th sink token.
    #[inline]
    pub fn sink_id(&self, i: usize) -> u32 {
        (self.data_vocab() + i) as u32
    }

    #[inline]
    pub fn is_sink_id(&self, token: u32) -> bool {
        token as usize >= self.data_vocab()
    }
}

/// `[sink_0, …, sink_{k-1}] ++ sample` where `k = cfg.n_sink_tokens`.
pub fn prepend_sink_tokens(sample: &[u32], cfg: &ModelConfig) -> Vec<u32> {
    let mut out: Vec<u32> = (0..cfg.n_sink_tokens).map(|i| cfg.sink_id(i)).collect();
    out.extend_from_slice(sample);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn odd_rope_head_is_rejected() {
        let cfg = ModelConfig {
            n_heads: 2,
            d_head: 3,
            d_model: 6,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let alibi = ModelConfig {
            pos_kind: PosKind::Alibi,
            ..cfg
        };
        alibi.validate().unwrap();
    }

    #[test]
    fn sink_prepend() {
        let mut cfg = ModelConfig::default();
        assert_eq!(prepend_sink_tokens(&[5, 9], &cfg), vec![5, 9]);
        cfg.n_sink_tokens = 1;
        assert_eq!(prepend_sink_tokens(&[5, 9], &cfg), vec![256, 5, 9]);
        cfg.n_sink_tokens = 2;
        assert_eq!(prepend_sink_tokens(&[], &cfg), vec![256, 257]);
        assert!(cfg.is_sink_id(257) && !cfg.is_sink_id(255));
    }
}
