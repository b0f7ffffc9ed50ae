//! Compact transformer encoder with a two-class head, dropout and exact
//! analytic gradients.
//!
//! The block is the usual pre-LN layout: `x + Attn(LN(x))` followed by
//! `x + FF(LN(x))`, GELU in the feed-forward, a final layer norm on the
//! position-0 state and a linear head producing two logits. Only the
//! position-0 row of the last layer feeds the head, so that layer computes
//! queries, residuals and feed-forward for row 0 alone.

mod attention;
mod dropout;
mod model;
mod params;

use serde::{Deserialize, Serialize};

pub use attention::{attention, softmax_rows};
pub use dropout::DropoutMask;
pub use model::{backward, backward_logits, forward, forward_with_cache, softmax2, ForwardCache, Prediction};
pub use params::{Checkpoint, EncoderParams, LayerParams, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Add a learned embedding for tokens whose value also occurs in the
    /// other record of the pair.
    pub match_features: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 128,
            dropout_rate: 0.1,
            seed: 0,
            match_features: true,
        }
    }
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("encoder.n_heads", "d_model must be a positive multiple of n_heads"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("encoder.n_layers", "at least one layer is required"));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::config("encoder.d_ff", "d_ff and max_len must be positive"));
        }
        if self.vocab_size < crate::preprocess::SPECIAL_TOKENS.len() {
            return Err(Error::config("encoder.vocab_size", "must cover the reserved tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("encoder.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}
