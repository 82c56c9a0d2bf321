use candle_core::Tensor;

use super::attention::MultiHeadAttention;
use super::layers::{FeedForward, LayerNorm};
use super::ops::Ctx;
use super::params::ParamBuilder;
use crate::error::Result;

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(&pb.pp("norm_attn"), dim)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, dim, dim, heads)?,
            norm_ffn: LayerNorm::new(&pb.pp("norm_ffn"), dim)?,
            ffn: FeedForward::new(&pb.pp("ffn"), dim, expansion)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let x = (x + ctx.dropout(&self.attn.forward(&h, &h, mask)?)?)?;
        let h = self.norm_ffn.forward(&x)?;
        Ok((&x + ctx.dropout(&self.ffn.forward(&h, ctx)?)?)?)
    }
}

/// Pre-norm transformer decoder layer: causal self-attention, cross-attention
/// into a memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(&pb.pp("norm_self"), dim)?,
            self_attn: MultiHeadAttention::new(&pb.pp("self_attn"), dim, dim, dim, heads)?,
            norm_cross: LayerNorm::new(&pb.pp("norm_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(&pb.pp("cross_attn"), dim, dim, dim, heads)?,
            norm_ffn: LayerNorm::new(&pb.pp("norm_ffn"), dim)?,
            ffn: FeedForward::new(&pb.pp("ffn"), dim, expansion)?,
        })
    }

    /// `x` is `[B, T, D]`. `memory` is either shared across positions
    /// (`[B, M, D]`) or per position (`[B, T, M, D]`), in which case query
    /// position `t` attends only to `memory[:, t]`.
    pub fn forward(&self, x: &Tensor, memory: &Tensor, causal: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + ctx.dropout(&self.self_attn.forward(&h, &h, Some(causal))?)?)?;
        let h = self.norm_cross.forward(&x)?;
        let cross = if memory.rank() == 4 {
            let (b, t, d) = h.dims3()?;
            let (_, _, m, _) = memory.dims4()?;
            let q = h.reshape((b * t, 1, d))?;
            let kv = memory.reshape((b * t, m, d))?;
            self.cross_attn.forward(&q, &kv, None)?.reshape((b, t, d))?
        } else {
            self.cross_attn.forward(&h, memory, None)?
        };
        let x = (x + ctx.dropout(&cross)?)?;
        let h = self.norm_ffn.forward(&x)?;
        Ok((&x + ctx.dropout(&self.ffn.forward(&h, ctx)?)?)?)
    }
}
