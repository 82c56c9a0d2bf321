use candle_core::Tensor;

use super::layers::Linear;
use super::ops::softmax_last;
use super::params::ParamBuilder;
use crate::error::{Error, Result};

/// Output of an attention call together with the per-head weights
/// `[B, heads, Tq, Tk]`.
pub struct Attended {
    pub output: Tensor,
    pub weights: Tensor,
}

/// Scaled dot-product multi-head attention. Queries and keys/values may come
/// from spaces of different width; the output is projected back to the query
/// width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        pb: &ParamBuilder,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&pb.pp("q"), q_dim, dim)?,
            k: Linear::new(&pb.pp("k"), kv_dim, dim)?,
            v: Linear::new(&pb.pp("v"), kv_dim, dim)?,
            o: Linear::new(&pb.pp("o"), dim, q_dim)?,
            heads,
            dim,
        })
    }

    pub fn from_linears(q: Linear, k: Linear, v: Linear, o: Linear, heads: usize) -> Self {
        let dim = q.out_dim();
        Self {
            q,
            k,
            v,
            o,
            heads,
            dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` is `[B, Tq, q_dim]`, `kv` is `[B, Tk, kv_dim]`; `mask` is an
    /// additive mask broadcastable to `[B, heads, Tq, Tk]`.
    pub fn attend(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Attended> {
        let (b, tq, _) = query.dims3()?;
        let (bk, _, _) = kv.dims3()?;
        if b != bk {
            return Err(Error::shape("attention batch", b, bk));
        }
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let weights = softmax_last(&scores)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, self.dim))?;
        Ok(Attended {
            output: self.o.forward(&ctx)?,
            weights,
        })
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.attend(query, kv, mask)?.output)
    }
}
