//! Encoder, causal decoder, cross-attention and gated fusion.

mod config;
mod forward;
pub mod gradcheck;
mod io;
mod params;

pub use config::{FusionMode, GateGranularity, ModelConfig};
pub use forward::{
    batch_loss, cross_attend, decode_forward, decode_forward_pinned, encode, forward_loss, gate,
    CrossAttention, DecoderNodes, DecoderOutput, EncoderNodes, EncoderOutput, GateTrace, Mode,
    ModelGraph, LAYER_NORM_EPS,
};
pub use io::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use params::{expected_shapes, init_parameters, Checkpoint, ParamSet, INIT_STD};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Anything that scores next tokens given a source and a decoder prefix.
pub trait LanguageModel {
    /// Per-source state computed once and reused for every step.
    type Context;

    fn vocab_size(&self) -> usize;

    /// Longest source or decoder input the model accepts.
    fn max_len(&self) -> usize;

    fn condition(&self, source: &[TokenId]) -> Result<Self::Context>;

    /// `[prefix.len(), vocab_size]` logits; row `t` scores the token after
    /// `prefix[..=t]`.
    fn logits(&self, ctx: &Self::Context, prefix: &[TokenId]) -> Result<Tensor>;
}

impl LanguageModel for Checkpoint {
    type Context = Option<EncoderOutput>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn condition(&self, source: &[TokenId]) -> Result<Self::Context> {
        if source.is_empty() {
            return Err(Error::Contract("source must be non-empty".into()));
        }
        if source.len() > self.max_len() {
            return Err(Error::Length {
                len: source.len(),
                max: self.max_len(),
            });
        }
        if self.config().fusion_mode.uses_encoder() {
            encode(source, self, Mode::Eval).map(Some)
        } else {
            Ok(None)
        }
    }

    fn logits(&self, ctx: &Self::Context, prefix: &[TokenId]) -> Result<Tensor> {
        Ok(decode_forward(prefix, ctx.as_ref(), self, Mode::Eval)?.logits)
    }
}

#[cfg(test)]
mod tests;
