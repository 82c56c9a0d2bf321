//! Transformer report decoder: teacher-forced scoring, greedy generation and
//! the sequence cross-entropy.

use candle_core::{DType, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{causal_mask, log_softmax_last, sinusoidal_positions, softmax_last, Ctx};
use crate::nn::{DecoderLayer, Embedding, Init, LayerNorm, Linear, ParamBuilder};

pub const NAMESPACE: &str = "decoder";

pub const SOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Probability floor applied before taking logs in [`sequence_loss`].
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            model_dim: 32,
            num_heads: 4,
            ffn_expansion: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder.model_dim {} not divisible by decoder.num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("decoder.num_layers must be positive".into()));
        }
        Ok(())
    }
}

/// Integer-encoded report: `[SOS] w_1 .. w_L [EOS] [PAD]*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Content tokens between `[SOS]` and the first `[EOS]`/`[PAD]`.
    pub fn content(&self) -> &[u32] {
        let start = usize::from(self.ids.first() == Some(&SOS_ID));
        let end = self.ids[start..]
            .iter()
            .position(|&t| t == EOS_ID || t == PAD_ID)
            .map_or(self.ids.len(), |p| start + p);
        &self.ids[start..end]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.first() != Some(&SOS_ID) {
            return Err(Error::Data("token sequence must begin with [SOS]".into()));
        }
        if let Some(position) = self.ids.iter().position(|&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                position,
                id: self.ids[position],
                vocab_size,
            });
        }
        if let Some(eos) = self.ids.iter().position(|&t| t == EOS_ID) {
            if self.ids[eos + 1..].iter().any(|&t| t != PAD_ID) {
                return Err(Error::Data("content token after [EOS]".into()));
            }
        }
        Ok(())
    }

    /// Teacher-forcing split: query `ids[..n-1]`, target `ids[1..]`.
    pub fn query_and_target(&self) -> (&[u32], &[u32]) {
        let n = self.ids.len();
        (&self.ids[..n.saturating_sub(1)], &self.ids[1.min(n)..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// `[SOS]` followed by the generated tokens (including a final `[EOS]`
    /// when generation stopped on it).
    pub tokens: TokenSequence,
    pub step_distributions: Vec<Vec<f64>>,
    pub terminated_by: Termination,
}

/// Cross-attention memory for the decoder.
#[derive(Debug, Clone)]
pub enum Memory {
    /// `[B, M, D]`, shared by all query positions.
    Shared(Tensor),
    /// `[B, T, M, D]`: position `t` attends to `memory[:, t]`.
    PerPosition(Tensor),
}

impl Memory {
    fn tensor(&self) -> &Tensor {
        match self {
            Memory::Shared(t) | Memory::PerPosition(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReportDecoder {
    cfg: DecoderConfig,
    tokens: Embedding,
    positions: Tensor,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    output: Linear,
    max_length: usize,
}

impl ReportDecoder {
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig, vocab_size: usize, max_length: usize) -> Result<Self> {
        cfg.validate()?;
        if max_length < 2 {
            return Err(Error::Config(format!("max_length must be at least 2, got {max_length}")));
        }
        let pb = pb.pp(NAMESPACE);
        let d = cfg.model_dim;
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(&pb.pp(format!("layer{i}")), d, cfg.num_heads, cfg.ffn_expansion))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            tokens: Embedding::new(&pb.pp("tokens"), vocab_size, d)?,
            positions: sinusoidal_positions(max_length, d, pb.dtype(), pb.device())?,
            layers,
            final_norm: LayerNorm::new(&pb.pp("final_norm"), d)?,
            output: Linear::with_init(&pb.pp("output"), d, vocab_size, Init::Normal { std: 0.02 })?,
            max_length,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.count()
    }

    #[cfg(test)]
    pub(crate) fn set_output(&mut self, output: Linear) {
        self.output = output;
    }

    /// Logits `[B, T, V]` for query ids `[B, T]`.
    pub fn logits(&self, memory: &Memory, query: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, t) = query.dims2()?;
        if t > self.max_length {
            return Err(Error::shape("decoder query length (max_length)", self.max_length, t));
        }
        if let Memory::PerPosition(m) = memory {
            let (mb, mt, _, _) = m.dims4()?;
            if (mb, mt) != (b, t) {
                return Err(Error::shape("per-position memory (B, T)", (b, t), (mb, mt)));
            }
        }
        let scale = (self.cfg.model_dim as f64).sqrt();
        let emb = (self.tokens.forward(query)? * scale)?;
        let mut h = ctx.dropout(&emb.broadcast_add(&self.positions.i(..t)?)?)?;
        let mask = causal_mask(t, h.dtype(), h.device())?;
        for layer in &self.layers {
            h = layer.forward(&h, memory.tensor(), &mask, ctx)?;
        }
        self.output.forward(&self.final_norm.forward(&h)?)
    }

    /// Per-position next-token distributions `[B, T, V]` under teacher forcing.
    pub fn decode_teacher_forced(&self, memory: &Memory, query: &Tensor) -> Result<Tensor> {
        softmax_last(&self.logits(memory, query, &Ctx::eval())?.to_dtype(DType::F64)?)
    }

    /// Greedy decoding from `[SOS]`. `memory_for` receives the current
    /// prefixes (one per example, all the same length) and returns the
    /// `[B, M, D]` memory that the last prefix position attends to.
    pub fn generate<F>(&self, batch: usize, mut memory_for: F) -> Result<Vec<GenerationResult>>
    where
        F: FnMut(&[Vec<u32>]) -> Result<Tensor>,
    {
        let device = self.positions.device().clone();
        let mut prefixes: Vec<Vec<u32>> = vec![vec![SOS_ID]; batch];
        let mut done: Vec<Option<Termination>> = vec![None; batch];
        let mut dists: Vec<Vec<Vec<f64>>> = vec![Vec::new(); batch];
        let mut cache: Vec<Tensor> = Vec::new();
        for step in 0..self.max_length - 1 {
            let mem = memory_for(&prefixes)?;
            cache.push(mem.unsqueeze(1)?);
            let memory = Memory::PerPosition(Tensor::cat(&cache, 1)?);
            let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
            let query = Tensor::from_vec(flat, (batch, step + 1), &device)?;
            let logits = self.logits(&memory, &query, &Ctx::eval())?;
            let last = logits.i((.., step))?.to_dtype(DType::F64)?;
            let probs = softmax_last(&last)?.to_vec2::<f64>()?;
            for (b, p) in probs.into_iter().enumerate() {
                if done[b].is_some() {
                    prefixes[b].push(PAD_ID);
                    continue;
                }
                let next = argmax_lowest(&p);
                dists[b].push(p);
                prefixes[b].push(next);
                if next == EOS_ID {
                    done[b] = Some(Termination::Eos);
                }
            }
            if done.iter().all(Option::is_some) {
                break;
            }
        }
        Ok(prefixes
            .into_iter()
            .zip(dists)
            .zip(done)
            .map(|((mut ids, step_distributions), term)| {
                ids.truncate(step_distributions.len() + 1);
                GenerationResult {
                    tokens: TokenSequence::new(ids),
                    step_distributions,
                    terminated_by: term.unwrap_or(Termination::MaxLength),
                }
            })
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(p: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best as u32
}

/// Sequence cross-entropy over probability vectors; `[PAD]` targets are
/// skipped. Returns the loss and how many target probabilities were clamped.
pub fn sequence_loss(distributions: &[Vec<f64>], targets: &[u32]) -> Result<(f64, usize)> {
    if distributions.len() != targets.len() {
        return Err(Error::shape("loss targets", distributions.len(), targets.len()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut clamped = 0usize;
    for (p, &w) in distributions.iter().zip(targets) {
        if w == PAD_ID {
            continue;
        }
        let prob = *p.get(w as usize).ok_or(Error::TokenOutOfRange {
            position: count,
            id: w,
            vocab_size: p.len(),
        })?;
        if prob < PROB_EPSILON {
            clamped += 1;
        }
        total -= prob.max(PROB_EPSILON).ln();
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, clamped));
    }
    Ok((total / count as f64, clamped))
}

/// Batched training loss from logits `[B, T, V]` and targets `[B, T]`: each
/// sequence averages over its non-`[PAD]` targets, then the batch averages
/// over sequences.
pub fn teacher_forced_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let log_probs = log_softmax_last(logits)?;
    let picked = log_probs
        .gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?
        .squeeze(D::Minus1)?;
    let keep = targets.ne(PAD_ID)?.to_dtype(picked.dtype())?;
    let per_seq_count = keep.sum(1)?;
    let per_seq = (picked * &keep)?.sum(1)?.div(&per_seq_count)?;
    Ok(per_seq.mean_all()?.neg()?)
}
