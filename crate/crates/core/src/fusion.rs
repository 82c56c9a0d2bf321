//! Text-modulated multi-scale fusion and the vision transformer that turns
//! the fused grid into the decoder's memory sequence.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::Stream;
use crate::backbone::{FeatureMap, GlobalTextFeature};
use crate::error::{Error, Result};
use crate::nn::ops::Ctx;
use crate::nn::{Conv2d, ConvTranspose2d, EncoderLayer, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};

pub const NAMESPACE: &str = "fusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Channel width `C` of the unified scale, of `Z` and of `X`.
    pub channels: usize,
    pub num_heads: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub ffn_expansion: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            num_heads: 4,
            vit_layers: 3,
            vit_heads: 4,
            ffn_expansion: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "fusion.channels {} not divisible by fusion.num_heads {}",
                self.channels, self.num_heads
            )));
        }
        if self.vit_heads == 0 || model_dim % self.vit_heads != 0 {
            return Err(Error::Config(format!(
                "decoder.model_dim {model_dim} not divisible by fusion.vit_heads {}",
                self.vit_heads
            )));
        }
        if self.vit_layers == 0 {
            return Err(Error::Config("fusion.vit_layers must be positive".into()));
        }
        Ok(())
    }
}

/// `[2, H, W]`: channel 0 is x (varies along columns), channel 1 is y, both
/// linearly spaced over [-1, 1].
pub fn coordinate_grid(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let space = |n: usize, i: usize| {
        if n <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut values = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        for j in 0..w {
            values.push(space(w, j));
        }
    }
    for i in 0..h {
        for _ in 0..w {
            values.push(space(h, i));
        }
    }
    Ok(Tensor::from_vec(values, (2, h, w), device)?.to_dtype(dtype)?)
}

/// Per-scale projection `s(.)` onto the middle scale.
#[derive(Debug, Clone)]
enum Resample {
    Down(Conv2d),
    Same(Conv2d),
    Up(ConvTranspose2d),
}

impl Resample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Resample::Down(c) | Resample::Same(c) => c.forward(x),
            Resample::Up(c) => c.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
struct Modulation {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    cfg: FusionConfig,
    unify: Vec<Resample>,
    modulation: Vec<Modulation>,
    fuse: Conv2d,
    coord_conv: Conv2d,
    embed: Linear,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    target: (usize, usize),
}

impl Fusion {
    /// `stage_shapes` are the `(C_i, H_i, W_i)` of the three visual scales.
    pub fn new(
        pb: &ParamBuilder,
        cfg: &FusionConfig,
        stage_shapes: [(usize, usize, usize); 3],
        global_dim: usize,
        model_dim: usize,
    ) -> Result<Self> {
        cfg.validate(model_dim)?;
        let pb = pb.pp(NAMESPACE);
        let c = cfg.channels;
        let [(c1, _, _), (c2, h2, w2), (c3, _, _)] = stage_shapes;
        let unify = vec![
            Resample::Down(Conv2d::new(&pb.pp("unify1"), c1, c, 3, 2, 1, true, None)?),
            Resample::Same(Conv2d::new(&pb.pp("unify2"), c2, c, 3, 1, 1, true, None)?),
            Resample::Up(ConvTranspose2d::new(&pb.pp("unify3"), c3, c, 2, 2, None)?),
        ];
        let modulation = (1..=3)
            .map(|i| {
                let pb = pb.pp(format!("modulate{i}"));
                Ok(Modulation {
                    norm: LayerNorm::new(&pb.pp("norm"), c)?,
                    attn: MultiHeadAttention::new(&pb.pp("attn"), c, global_dim, c, cfg.num_heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = (0..cfg.vit_layers)
            .map(|i| {
                EncoderLayer::new(
                    &pb.pp(format!("vit{i}")),
                    model_dim,
                    cfg.vit_heads,
                    cfg.ffn_expansion,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            unify,
            modulation,
            fuse: Conv2d::new(&pb.pp("fuse"), 3 * c, c, 1, 1, 0, true, None)?,
            coord_conv: Conv2d::new(&pb.pp("coord_conv"), c + 2, c, 3, 1, 1, true, None)?,
            embed: Linear::new(&pb.pp("embed"), c, model_dim)?,
            layers,
            final_norm: LayerNorm::new(&pb.pp("final_norm"), model_dim)?,
            target: (h2, w2),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn vit_depth(&self) -> usize {
        self.layers.len()
    }

    /// `s(F~_i)`: `[B, C, H_2, W_2]`.
    pub fn unify(&self, adapted: &FeatureMap) -> Result<Tensor> {
        let i = adapted.scale_index.checked_sub(1).filter(|i| *i < 3).ok_or_else(|| {
            Error::shape("fusion scale index", "1..=3", adapted.scale_index)
        })?;
        let out = self.unify[i].forward(&adapted.data)?;
        let (_, _, h, w) = out.dims4()?;
        if (h, w) != self.target {
            return Err(Error::shape(
                format!("unified scale of visual scale {}", i + 1),
                self.target,
                (h, w),
            ));
        }
        Ok(out)
    }

    /// `M_i = s(F~_i) + MHCA(q = s(F~_i), kv = tau)`. Returns the modulated map
    /// and the attention weights `[B, heads, H*W, 1]`.
    pub fn modulate(&self, adapted: &FeatureMap, tau: &GlobalTextFeature) -> Result<(FeatureMap, Tensor)> {
        let unified = self.unify(adapted)?;
        let stream = Stream::from_grid(&unified)?;
        let m = &self.modulation[adapted.scale_index - 1];
        let (b, dg) = tau.data.dims2()?;
        let kv = tau.data.reshape((b, 1, dg))?;
        let q = m.norm.forward(&stream.data)?;
        let att = m.attn.attend(&q, &kv, None)?;
        let modulated = Stream {
            data: (&stream.data + att.output)?,
            ..stream
        };
        Ok((
            FeatureMap {
                scale_index: adapted.scale_index,
                data: modulated.to_grid()?,
            },
            att.weights,
        ))
    }

    /// `Z = Conv1x1(Concat(M_1, M_2, M_3))`.
    pub fn fuse_scales(&self, modulated: &[FeatureMap]) -> Result<Tensor> {
        let first = modulated
            .first()
            .ok_or_else(|| Error::shape("fuse_scales inputs", 3, 0))?;
        let (_, _, h, w) = first.data.dims4()?;
        for m in modulated {
            let (_, _, mh, mw) = m.data.dims4()?;
            if (mh, mw) != (h, w) {
                return Err(Error::shape(
                    format!("spatial size of modulated scale {}", m.scale_index),
                    (h, w),
                    (mh, mw),
                ));
            }
        }
        let parts: Vec<&Tensor> = modulated.iter().map(|m| &m.data).collect();
        self.fuse.forward(&Tensor::cat(&parts, 1)?)
    }

    /// `X = Conv3x3(Concat(Z, P))`.
    pub fn add_coordinates(&self, z: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = z.dims4()?;
        let grid = coordinate_grid(h, w, z.dtype(), z.device())?
            .unsqueeze(0)?
            .broadcast_as((b, 2, h, w))?;
        self.coord_conv.forward(&Tensor::cat(&[z, &grid], 1)?)
    }

    /// Flattens `X` into `H*W` tokens (1x1 patches) and runs the vision
    /// transformer: `[B, H*W, D_dec]`.
    pub fn to_token_sequence(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let tokens = Stream::from_grid(x)?.data;
        let mut h = ctx.dropout(&self.embed.forward(&tokens)?)?;
        for layer in &self.layers {
            h = layer.forward(&h, None, ctx)?;
        }
        self.final_norm.forward(&h)
    }

    pub fn forward(&self, adapted: &[FeatureMap], tau: &GlobalTextFeature, ctx: &Ctx) -> Result<Tensor> {
        let modulated = adapted
            .iter()
            .map(|f| Ok(self.modulate(f, tau)?.0))
            .collect::<Result<Vec<_>>>()?;
        let z = self.fuse_scales(&modulated)?;
        let x = self.add_coordinates(&z)?;
        self.to_token_sequence(&x, ctx)
    }
}
