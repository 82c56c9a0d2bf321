//! Uni- and cross-modal adapter.
//!
//! Per stage `i`, for both modalities:
//!
//! ```text
//! F^_i  = down(F_i) + pool(F^_{i-1})        T^_i  = down(T_i) + T^_{i-1}
//! Fsa_i = MHSA(F^_i)                        Tsa_i = MHSA(T^_i)
//! Fca_i = FFN(MHCA(q=Fsa_i, kv=T^_i))       Tca_i = FFN(MHCA(q=Tsa_i, kv=F^_i))
//! F~_i  = up(Fca_i) + F_i                   T~_i  = up(Tca_i) + T_i
//! ```
//!
//! Visual maps are flattened to `H*W` sequences for attention. `pool` is a
//! 2x2 average that brings the previous, finer stage onto the current grid.
//! Up-projections start at zero so the adapted model starts exactly at the
//! backbone.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, TokenFeatures};
use crate::error::{Error, Result};
use crate::nn::layers::expect_dims;
use crate::nn::ops::{all_finite, Ctx};
use crate::nn::{Attended, Conv2d, ConvTranspose2d, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};

pub const NAMESPACE: &str = "adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub adapter_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub num_stages: usize,
    /// Zero-initialize the up-projections (identity at initialization).
    pub zero_init_up: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            adapter_dim: 64,
            num_heads: 4,
            ffn_expansion: 4,
            num_stages: 3,
            zero_init_up: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.adapter_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "adapter.adapter_dim {} not divisible by adapter.num_heads {}",
                self.adapter_dim, self.num_heads
            )));
        }
        if self.num_stages != 3 {
            return Err(Error::Config(format!(
                "adapter.num_stages must match the 3 backbone stages, got {}",
                self.num_stages
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("adapter.ffn_expansion must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

/// Reduced-space features in sequence layout `[B, L, adapter_dim]`.
/// Visual streams remember their grid so they can be restored.
#[derive(Debug, Clone)]
pub struct Stream {
    pub modality: Modality,
    pub data: Tensor,
    pub grid: Option<(usize, usize)>,
}

impl Stream {
    pub fn textual(data: Tensor) -> Self {
        Self {
            modality: Modality::Textual,
            data,
            grid: None,
        }
    }

    /// Flattens `[B, C, H, W]` into `[B, H*W, C]`.
    pub fn from_grid(grid: &Tensor) -> Result<Self> {
        let (b, c, h, w) = grid.dims4()?;
        let data = grid.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        Ok(Self {
            modality: Modality::Visual,
            data,
            grid: Some((h, w)),
        })
    }

    /// Inverse of [`Stream::from_grid`].
    pub fn to_grid(&self) -> Result<Tensor> {
        let (h, w) = self
            .grid
            .ok_or_else(|| Error::shape("to_grid", "visual stream", "textual stream"))?;
        let (b, _, c) = self.data.dims3()?;
        Ok(self.data.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
    }

    fn with_data(&self, data: Tensor) -> Self {
        Self {
            modality: self.modality,
            data,
            grid: self.grid,
        }
    }
}

#[derive(Debug, Clone)]
struct SelfAttentionBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
struct CrossAttentionBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Stage {
    vis_down: Conv2d,
    txt_down: Linear,
    vis_sa: SelfAttentionBlock,
    txt_sa: SelfAttentionBlock,
    vis_ca: CrossAttentionBlock,
    txt_ca: CrossAttentionBlock,
    vis_up: ConvTranspose2d,
    txt_up: Linear,
    channels: usize,
    text_dim: usize,
}

impl Stage {
    fn new(pb: &ParamBuilder, cfg: &AdapterConfig, channels: usize, text_dim: usize) -> Result<Self> {
        let a = cfg.adapter_dim;
        let h = cfg.num_heads;
        let sa = |name: &str| -> Result<SelfAttentionBlock> {
            let pb = pb.pp(name);
            Ok(SelfAttentionBlock {
                norm: LayerNorm::new(&pb.pp("norm"), a)?,
                attn: MultiHeadAttention::new(&pb.pp("attn"), a, a, a, h)?,
            })
        };
        let ca = |name: &str| -> Result<CrossAttentionBlock> {
            let pb = pb.pp(name);
            Ok(CrossAttentionBlock {
                norm_q: LayerNorm::new(&pb.pp("norm_q"), a)?,
                norm_kv: LayerNorm::new(&pb.pp("norm_kv"), a)?,
                attn: MultiHeadAttention::new(&pb.pp("attn"), a, a, a, h)?,
                ffn: FeedForward::new(&pb.pp("ffn"), a, cfg.ffn_expansion)?,
            })
        };
        let up_init = if cfg.zero_init_up {
            Init::Zeros
        } else {
            Init::fan_in(a)
        };
        Ok(Self {
            vis_down: Conv2d::new(&pb.pp("vis_down"), channels, a, 1, 1, 0, true, None)?,
            txt_down: Linear::new(&pb.pp("txt_down"), text_dim, a)?,
            vis_sa: sa("vis_sa")?,
            txt_sa: sa("txt_sa")?,
            vis_ca: ca("vis_ca")?,
            txt_ca: ca("txt_ca")?,
            vis_up: ConvTranspose2d::new(&pb.pp("vis_up"), a, channels, 1, 1, Some(up_init))?,
            txt_up: Linear::with_init(&pb.pp("txt_up"), a, text_dim, up_init)?,
            channels,
            text_dim,
        })
    }
}

/// Everything computed for one stage; kept only on request.
#[derive(Debug, Clone)]
pub struct StageIntermediates {
    pub visual_reduced: Stream,
    pub textual_reduced: Stream,
    pub visual_self: Stream,
    pub textual_self: Stream,
    pub visual_cross: Stream,
    pub textual_cross: Stream,
}

#[derive(Debug, Clone)]
pub struct AdaptedFeatures {
    pub visual: Vec<FeatureMap>,
    pub textual: Vec<TokenFeatures>,
    pub intermediates: Option<Vec<StageIntermediates>>,
}

#[derive(Debug, Clone)]
pub struct UniCrossAdapter {
    cfg: AdapterConfig,
    stages: Vec<Stage>,
}

impl UniCrossAdapter {
    pub fn new(
        pb: &ParamBuilder,
        cfg: &AdapterConfig,
        stage_channels: [usize; 3],
        text_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let pb = pb.pp(NAMESPACE);
        let stages = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Stage::new(&pb.pp(format!("stage{}", i + 1)), cfg, c, text_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    fn stage(&self, i: usize) -> Result<&Stage> {
        self.stages
            .get(i)
            .ok_or_else(|| Error::shape("adapter stage index", self.stages.len(), i))
    }

    /// `F^_i = down(F_i) + pool(F^_{i-1})` with `prev = None` as the zero state.
    /// Returns the reduced map `[B, a, H_i, W_i]`.
    pub fn down_chain_visual(&self, stage: usize, features: &Tensor, prev: Option<&Tensor>) -> Result<Tensor> {
        let st = self.stage(stage)?;
        let (b, c, h, w) = features.dims4()?;
        if c != st.channels {
            return Err(Error::shape(
                format!("visual stage {} channels", stage + 1),
                st.channels,
                c,
            ));
        }
        let reduced = st.vis_down.forward(features)?;
        match prev {
            None => Ok(reduced),
            Some(prev) => {
                let pooled = prev.avg_pool2d(2)?;
                expect_dims(
                    &format!("previous reduced map at stage {}", stage + 1),
                    &pooled,
                    &[b, self.cfg.adapter_dim, h, w],
                )?;
                Ok((reduced + pooled)?)
            }
        }
    }

    /// `T^_i = down(T_i) + T^_{i-1}`; returns `[B, N, a]`.
    pub fn down_chain_textual(&self, stage: usize, features: &Tensor, prev: Option<&Tensor>) -> Result<Tensor> {
        let st = self.stage(stage)?;
        let (b, n, d) = features.dims3()?;
        if d != st.text_dim {
            return Err(Error::shape(
                format!("textual block {} width", stage + 1),
                st.text_dim,
                d,
            ));
        }
        let reduced = st.txt_down.forward(features)?;
        match prev {
            None => Ok(reduced),
            Some(prev) => {
                expect_dims(
                    &format!("previous reduced text at block {}", stage + 1),
                    prev,
                    &[b, n, self.cfg.adapter_dim],
                )?;
                Ok((reduced + prev)?)
            }
        }
    }

    /// Multi-head self-attention within one modality.
    pub fn self_attend(&self, stage: usize, reduced: &Stream) -> Result<(Stream, Tensor)> {
        if !all_finite(&reduced.data)? {
            return Err(Error::NonFinite(format!(
                "{} adapter input at stage {}",
                reduced.modality.name(),
                stage + 1
            )));
        }
        let st = self.stage(stage)?;
        let block = match reduced.modality {
            Modality::Visual => &st.vis_sa,
            Modality::Textual => &st.txt_sa,
        };
        let h = block.norm.forward(&reduced.data)?;
        let Attended { output, weights } = block.attn.attend(&h, &h, None)?;
        Ok((reduced.with_data(output), weights))
    }

    /// Cross-attention from one modality's self-attended stream into the other
    /// modality's reduced stream, followed by the FFN. Also returns the
    /// pre-FFN attention output and the attention weights.
    pub fn cross_attend(
        &self,
        stage: usize,
        query: &Stream,
        key_value: &Stream,
        ctx: &Ctx,
    ) -> Result<CrossAttended> {
        if query.modality == key_value.modality {
            return Err(Error::ModalityPairing(query.modality.name()));
        }
        let st = self.stage(stage)?;
        let block = match query.modality {
            Modality::Visual => &st.vis_ca,
            Modality::Textual => &st.txt_ca,
        };
        let q = block.norm_q.forward(&query.data)?;
        let kv = block.norm_kv.forward(&key_value.data)?;
        let Attended { output, weights } = block.attn.attend(&q, &kv, None)?;
        let out = block.ffn.forward(&output, ctx)?;
        Ok(CrossAttended {
            stream: query.with_data(out),
            attention: output,
            weights,
        })
    }

    /// `F~_i = up(Fca_i) + F_i`.
    pub fn up_inject_visual(&self, stage: usize, cross: &Stream, original: &FeatureMap) -> Result<FeatureMap> {
        let st = self.stage(stage)?;
        let recovered = st.vis_up.forward(&cross.to_grid()?)?;
        expect_dims(
            &format!("recovered visual map at stage {}", stage + 1),
            &recovered,
            original.data.dims(),
        )?;
        Ok(FeatureMap {
            scale_index: original.scale_index,
            data: (recovered + &original.data)?,
        })
    }

    /// `T~_i = up(Tca_i) + T_i`.
    pub fn up_inject_textual(&self, stage: usize, cross: &Stream, original: &TokenFeatures) -> Result<TokenFeatures> {
        let st = self.stage(stage)?;
        let recovered = st.txt_up.forward(&cross.data)?;
        expect_dims(
            &format!("recovered text features at block {}", stage + 1),
            &recovered,
            original.data.dims(),
        )?;
        Ok(TokenFeatures {
            block_index: original.block_index,
            data: (recovered + &original.data)?,
        })
    }

    pub fn forward(
        &self,
        visual: &[FeatureMap],
        textual: &[TokenFeatures],
        ctx: &Ctx,
        keep_intermediates: bool,
    ) -> Result<AdaptedFeatures> {
        if visual.len() != self.stages.len() || textual.len() != self.stages.len() {
            return Err(Error::shape(
                "adapter stages (visual, textual)",
                (self.stages.len(), self.stages.len()),
                (visual.len(), textual.len()),
            ));
        }
        let mut prev_v: Option<Tensor> = None;
        let mut prev_t: Option<Tensor> = None;
        let mut out_v = Vec::with_capacity(visual.len());
        let mut out_t = Vec::with_capacity(textual.len());
        let mut kept = keep_intermediates.then(Vec::new);
        for i in 0..self.stages.len() {
            let v_hat = self.down_chain_visual(i, &visual[i].data, prev_v.as_ref())?;
            let t_hat = self.down_chain_textual(i, &textual[i].data, prev_t.as_ref())?;
            let v_red = Stream::from_grid(&v_hat)?;
            let t_red = Stream::textual(t_hat.clone());
            let (v_sa, _) = self.self_attend(i, &v_red)?;
            let (t_sa, _) = self.self_attend(i, &t_red)?;
            let v_ca = self.cross_attend(i, &v_sa, &t_red, ctx)?.stream;
            let t_ca = self.cross_attend(i, &t_sa, &v_red, ctx)?.stream;
            out_v.push(self.up_inject_visual(i, &v_ca, &visual[i])?);
            out_t.push(self.up_inject_textual(i, &t_ca, &textual[i])?);
            if let Some(kept) = kept.as_mut() {
                kept.push(StageIntermediates {
                    visual_reduced: v_red,
                    textual_reduced: t_red,
                    visual_self: v_sa,
                    textual_self: t_sa,
                    visual_cross: v_ca,
                    textual_cross: t_ca,
                });
            }
            prev_v = Some(v_hat);
            prev_t = Some(t_hat);
        }
        Ok(AdaptedFeatures {
            visual: out_v,
            textual: out_t,
            intermediates: kept,
        })
    }
}

pub struct CrossAttended {
    /// `FFN(MHCA(...))`, the stage output.
    pub stream: Stream,
    /// `MHCA(...)` before the FFN.
    pub attention: Tensor,
    pub weights: Tensor,
}

/// Parameter count of an adapter for the given backbone widths.
pub fn parameter_count(cfg: &AdapterConfig, stage_channels: [usize; 3], text_dim: usize) -> usize {
    let a = cfg.adapter_dim;
    let e = cfg.ffn_expansion;
    let d = text_dim;
    let attn_block = 2 * a + 4 * a * a + 4 * a;
    let cross_block = 4 * a + 4 * a * a + 4 * a + 2 * e * a * a + e * a + a;
    stage_channels
        .iter()
        .map(|&c| (c + 1) * a + (d + 1) * a + 2 * attn_block + 2 * cross_block + (a + 1) * c + (a + 1) * d)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, D};

    const CH: [usize; 3] = [8, 16, 32];
    const TD: usize = 12;

    fn cfg(zero_up: bool) -> AdapterConfig {
        AdapterConfig {
            adapter_dim: 8,
            num_heads: 2,
            ffn_expansion: 4,
            num_stages: 3,
            zero_init_up: zero_up,
        }
    }

    fn adapter(store: &ParamStore, zero_up: bool) -> UniCrossAdapter {
        let pb = ParamBuilder::new(store, 21, DType::F64, &Device::Cpu);
        UniCrossAdapter::new(&pb, &cfg(zero_up), CH, TD).unwrap()
    }

    fn inputs(seed: u64) -> (Vec<FeatureMap>, Vec<TokenFeatures>) {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, seed, DType::F64, &Device::Cpu);
        let unit = Init::Normal { std: 1.0 };
        let visual = CH
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = 8 >> i;
                FeatureMap {
                    scale_index: i + 1,
                    data: pb.get((2, c, s, s), &format!("v{i}"), unit).unwrap(),
                }
            })
            .collect();
        let textual = (0..3)
            .map(|i| TokenFeatures {
                block_index: i + 1,
                data: pb.get((2, 5, TD), &format!("t{i}"), unit).unwrap(),
            })
            .collect();
        (visual, textual)
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_state_chain_equals_down_projection() {
        let store = ParamStore::new();
        let ad = adapter(&store, true);
        let (v, t) = inputs(1);
        let out = ad.down_chain_visual(0, &v[0].data, None).unwrap();
        let down = ad.stages[0].vis_down.forward(&v[0].data).unwrap();
        assert_eq!(flat(&out), flat(&down));
        let out = ad.down_chain_textual(0, &t[0].data, None).unwrap();
        let down = ad.stages[0].txt_down.forward(&t[0].data).unwrap();
        assert_eq!(flat(&out), flat(&down));
    }

    #[test]
    fn zero_down_weights_pass_previous_state_through() {
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let mut ad = adapter(&store, true);
        let a = 8;
        ad.stages[1].txt_down = Linear::from_tensors(
            Tensor::zeros((a, TD), DType::F64, &dev).unwrap(),
            Some(Tensor::zeros(a, DType::F64, &dev).unwrap()),
        );
        let (_, t) = inputs(2);
        let prev = Tensor::ones((2, 5, a), DType::F64, &dev).unwrap();
        let out = ad.down_chain_textual(1, &t[1].data, Some(&prev)).unwrap();
        assert_eq!(flat(&out), flat(&prev));
    }

    #[test]
    fn identity_like_chain_matches_hand_sums() {
        // One channel, identity 1x1 maps, 3 stages over 4x4 / 2x2 / 1x1 grids.
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, DType::F64, &dev);
        let cfg = AdapterConfig {
            adapter_dim: 1,
            num_heads: 1,
            ..cfg(true)
        };
        let mut ad = UniCrossAdapter::new(&pb, &cfg, [1, 2, 3], 1).unwrap();
        for (i, st) in ad.stages.iter_mut().enumerate() {
            let c = i + 1;
            let mut w = vec![0.0; c];
            w[0] = 1.0;
            st.vis_down = Conv2d::from_tensors(
                Tensor::from_vec(w, (1, c, 1, 1), &dev).unwrap(),
                None,
                1,
                0,
            );
        }
        let f1: Vec<f64> = (0..16).map(|x| x as f64).collect();
        let f2 = vec![100.0, 200.0, 300.0, 400.0];
        let f3 = vec![1000.0];
        let t1 = Tensor::from_vec(f1.clone(), (1, 1, 4, 4), &dev).unwrap();
        let t2 = Tensor::from_vec(
            [f2.clone(), vec![-1.0; 4]].concat(),
            (1, 2, 2, 2),
            &dev,
        )
        .unwrap();
        let t3 = Tensor::from_vec([f3.clone(), vec![9.0, 9.0]].concat(), (1, 3, 1, 1), &dev)
            .unwrap();
        let h1 = ad.down_chain_visual(0, &t1, None).unwrap();
        let h2 = ad.down_chain_visual(1, &t2, Some(&h1)).unwrap();
        let h3 = ad.down_chain_visual(2, &t3, Some(&h2)).unwrap();

        // Oracle: average each 2x2 block of the finer grid and add.
        let pool = |g: &[f64], n: usize| -> Vec<f64> {
            let m = n / 2;
            let mut out = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    out[i * m + j] = (g[2 * i * n + 2 * j]
                        + g[2 * i * n + 2 * j + 1]
                        + g[(2 * i + 1) * n + 2 * j]
                        + g[(2 * i + 1) * n + 2 * j + 1])
                        / 4.0;
                }
            }
            out
        };
        let e2: Vec<f64> = f2.iter().zip(pool(&f1, 4)).map(|(a, b)| a + b).collect();
        let e3: Vec<f64> = f3.iter().zip(pool(&e2, 2)).map(|(a, b)| a + b).collect();
        assert_eq!(flat(&h1), f1);
        assert_eq!(flat(&h2), e2);
        assert_eq!(flat(&h3), e3);
        assert_eq!(e3, vec![1000.0 + (2.5 + 4.5 + 10.5 + 12.5 + 1000.0) / 4.0]);
    }

    #[test]
    fn chain_rejects_mismatched_previous_state() {
        let store = ParamStore::new();
        let ad = adapter(&store, true);
        let (v, _) = inputs(3);
        let wrong = Tensor::zeros((2, 8, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            ad.down_chain_visual(1, &v[1].data, Some(&wrong)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn single_position_self_attention_is_value_projection() {
        let store = ParamStore::new();
        let ad = adapter(&store, true);
        let x = Tensor::new(&[[[0.3f64, -1.0, 2.0, 0.5, 0.0, 1.0, -0.2, 0.7]]], &Device::Cpu)
            .unwrap();
        let (out, w) = ad.self_attend(0, &Stream::textual(x.clone())).unwrap();
        assert!(flat(&w).iter().all(|v| *v == 1.0));
        let block = &ad.stages[0].txt_sa;
        let h = block.norm.forward(&x).unwrap();
        // With one key the context is exactly v(h); the block then applies o(.).
        let expected = block.attn.attend(&h, &h, None).unwrap().output;
        assert_eq!(flat(&out.data), flat(&expected));
    }

    #[test]
    fn self_attention_rows_sum_to_one_and_reject_nan() {
        let store = ParamStore::new();
        let ad = adapter(&store, true);
        let (v, _) = inputs(4);
        let hat = ad.down_chain_visual(0, &v[0].data, None).unwrap();
        let (_, w) = ad.self_attend(0, &Stream::from_grid(&hat).unwrap()).unwrap();
        for s in flat(&w.sum(D::Minus1).unwrap()) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        let bad = Tensor::new(&[[[f64::NAN; 8]]], &Device::Cpu).unwrap();
        assert!(matches!(
            ad.self_attend(0, &Stream::textual(bad)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_attention_contracts() {
        let store = ParamStore::new();
        let ad = adapter(&store, true);
        let (v, t) = inputs(5);
        let v_hat = ad.down_chain_visual(0, &v[0].data, None).unwrap();
        let t_hat = ad.down_chain_textual(0, &t[0].data, None).unwrap();
        let vs = Stream::from_grid(&v_hat).unwrap();
        let ts = Stream::textual(t_hat.clone());
        let ctx = Ctx::eval();
        let out = ad.cross_attend(0, &vs, &ts, &ctx).unwrap();
        assert_eq!(out.stream.data.dims(), &[2, 64, 8]);
        assert!(matches!(
            ad.cross_attend(0, &vs, &vs, &ctx),
            Err(Error::ModalityPairing("visual"))
        ));

        // Single key/value: every query row receives the same vector.
        let one = Stream::textual(t_hat.narrow(1, 0, 1).unwrap());
        let out = ad.cross_attend(0, &vs, &one, &ctx).unwrap();
        let rows = out.attention.to_vec3::<f64>().unwrap();
        for b in rows {
            for r in &b {
                assert_eq!(r, &b[0]);
            }
        }
        assert!(flat(&out.weights).iter().all(|w| *w == 1.0));
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let store = ParamStore::new();
        let ad = adapter(&store, true);
        let (v, t) = inputs(6);
        let out = ad.forward(&v, &t, &Ctx::eval(), false).unwrap();
        for (a, b) in out.visual.iter().zip(&v) {
            assert_eq!(flat(&a.data), flat(&b.data));
        }
        for (a, b) in out.textual.iter().zip(&t) {
            assert_eq!(flat(&a.data), flat(&b.data));
        }
    }

    #[test]
    fn zero_original_with_identity_up_returns_projection() {
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let mut ad = adapter(&store, true);
        let a = 8;
        let eye = Tensor::eye(a, DType::F64, &dev).unwrap();
        ad.stages[0].txt_up = Linear::from_tensors(
            Tensor::cat(&[&eye, &Tensor::zeros((TD - a, a), DType::F64, &dev).unwrap()], 0).unwrap(),
            None,
        );
        let cross = Tensor::rand(0f64, 1.0, (1, 5, a), &dev).unwrap();
        let original = TokenFeatures {
            block_index: 1,
            data: Tensor::zeros((1, 5, TD), DType::F64, &dev).unwrap(),
        };
        let out = ad
            .up_inject_textual(0, &Stream::textual(cross.clone()), &original)
            .unwrap();
        assert_eq!(
            flat(&out.data.narrow(2, 0, a).unwrap()),
            flat(&cross)
        );
    }

    #[test]
    fn forward_preserves_shapes_and_couples_modalities() {
        let store = ParamStore::new();
        let ad = adapter(&store, false);
        let (v, t) = inputs(7);
        let base = ad.forward(&v, &t, &Ctx::eval(), true).unwrap();
        for (a, b) in base.visual.iter().zip(&v) {
            assert_eq!(a.data.dims(), b.data.dims());
        }
        for (a, b) in base.textual.iter().zip(&t) {
            assert_eq!(a.data.dims(), b.data.dims());
        }
        assert_eq!(base.intermediates.as_ref().unwrap().len(), 3);

        // Perturb one token of the first text block: every visual scale moves.
        let mut t2 = t.clone();
        let bump = Tensor::zeros((2, 5, TD), DType::F64, &Device::Cpu)
            .unwrap()
            .slice_assign(&[0..1, 3..4, 0..TD], &Tensor::ones((1, 1, TD), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        t2[0].data = (&t2[0].data + bump).unwrap();
        let moved = ad.forward(&v, &t2, &Ctx::eval(), false).unwrap();
        for (a, b) in base.visual.iter().zip(&moved.visual) {
            assert_ne!(flat(&a.data), flat(&b.data));
        }

        // Perturb the coarsest visual map: text blocks move.
        let mut v2 = v.clone();
        v2[2].data = (&v2[2].data + 0.5).unwrap();
        let moved = ad.forward(&v2, &t, &Ctx::eval(), false).unwrap();
        assert_ne!(flat(&base.textual[2].data), flat(&moved.textual[2].data));
    }

    /// Closed-form count written from the declared layer shapes.
    fn analytic_count(ch: [usize; 3], d: usize, a: usize, e: usize) -> usize {
        let ln = 2 * a;
        let mha = 4 * (a * a + a);
        let ffn = (a * e * a + e * a) + (e * a * a + a);
        ch.iter()
            .map(|&c| {
                (c * a + a)          // visual down, 1x1 conv
                    + (d * a + a)    // text down
                    + 2 * (ln + mha) // self-attention blocks
                    + 2 * (2 * ln + mha + ffn) // cross-attention blocks
                    + (a * c + c)    // visual up, 1x1 deconv
                    + (a * d + d) // text up
            })
            .sum()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let store = ParamStore::new();
        adapter(&store, true);
        assert_eq!(store.count("adapter."), analytic_count(CH, TD, 8, 4));
        assert_eq!(store.trainable_count(), store.count("adapter."));
        assert_eq!(parameter_count(&cfg(true), CH, TD), analytic_count(CH, TD, 8, 4));
    }
}

