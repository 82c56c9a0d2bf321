//! Frozen dual-encoder contract: a multi-scale image encoder, a three-block
//! text encoder and a global text feature.
//!
//! Two variants share one architecture: `stand_in` draws random weights from
//! the run seed, `pretrained` loads them from a named-tensor weight archive.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{causal_mask, Ctx};
use crate::nn::{Conv2d, Embedding, EncoderLayer, Init, LayerNorm, Linear, ParamBuilder, ParamStore};

pub const NAMESPACE: &str = "backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Pretrained,
    StandIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_path: Option<PathBuf>,
    pub in_channels: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn_expansion: usize,
    pub global_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::StandIn,
            frozen: true,
            weight_path: None,
            in_channels: 1,
            image_size: 32,
            stem_channels: 4,
            stage_channels: [8, 16, 32],
            text_dim: 32,
            text_layers: 3,
            text_heads: 4,
            text_ffn_expansion: 4,
            global_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "backbone.image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        let [c1, c2, c3] = self.stage_channels;
        if !(c1 < c2 && c2 < c3) || c1 == 0 {
            return Err(Error::Config(format!(
                "backbone.stage_channels must strictly increase, got {:?}",
                self.stage_channels
            )));
        }
        if self.text_layers < 3 {
            return Err(Error::Config(
                "backbone.text_layers must be at least 3 (one per block)".into(),
            ));
        }
        if self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "backbone.text_dim {} not divisible by text_heads {}",
                self.text_dim, self.text_heads
            )));
        }
        if self.variant == BackboneVariant::Pretrained {
            match &self.weight_path {
                Some(p) if p.exists() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "backbone.weight_path {} does not exist",
                        p.display()
                    )))
                }
                None => {
                    return Err(Error::Config(
                        "backbone.variant = \"pretrained\" requires backbone.weight_path".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// `(C_i, H_i, W_i)` of the three exposed stages.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 3] {
        let mut h = self.image_size / 2;
        let mut out = [(0, 0, 0); 3];
        for (i, c) in self.stage_channels.iter().enumerate() {
            h /= 2;
            out[i] = (*c, h, h);
        }
        out
    }

    /// Closed-form parameter count of the declared architecture.
    pub fn parameter_count(&self, vocab_size: usize, text_len: usize) -> usize {
        let [c1, c2, c3] = self.stage_channels;
        let image = 9 * (self.in_channels * self.stem_channels
            + self.stem_channels * c1
            + c1 * c2
            + c2 * c3);
        let d = self.text_dim;
        let e = self.text_ffn_expansion;
        let layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * e * d + e * d) + (e * d * d + d);
        let text = vocab_size * d + text_len * d + self.text_layers * layer + 2 * d
            + d * self.global_dim
            + self.global_dim;
        image + text
    }
}

/// Layer ranges of the three text blocks: equal thirds, remainder to the
/// last block.
pub fn split_blocks(depth: usize) -> [Range<usize>; 3] {
    let per = depth / 3;
    [0..per, per..2 * per, 2 * per..depth]
}

/// Visual features of one scale, batched: `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub scale_index: usize,
    pub data: Tensor,
}

/// Text features of one block, batched: `[B, N, D]`.
#[derive(Debug, Clone)]
pub struct TokenFeatures {
    pub block_index: usize,
    pub data: Tensor,
}

/// `[B, D_g]`.
#[derive(Debug, Clone)]
pub struct GlobalTextFeature {
    pub data: Tensor,
}

#[derive(Debug, Clone)]
struct ImageEncoder {
    stem: Conv2d,
    stages: Vec<Conv2d>,
}

impl ImageEncoder {
    fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let conv = |name: &str, cin: usize, cout: usize| {
            Conv2d::new(&pb.pp(name), cin, cout, 3, 2, 1, false, Some(Init::he(cin * 9)))
        };
        let [c1, c2, c3] = cfg.stage_channels;
        Ok(Self {
            stem: conv("stem", cfg.in_channels, cfg.stem_channels)?,
            stages: vec![
                conv("stage1", cfg.stem_channels, c1)?,
                conv("stage2", c1, c2)?,
                conv("stage3", c2, c3)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<FeatureMap>> {
        let mut h = self.stem.forward(x)?.relu()?;
        let mut out = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(&h)?.relu()?;
            out.push(FeatureMap {
                scale_index: i + 1,
                data: h.clone(),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct TextEncoder {
    tokens: Embedding,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    projection: Linear,
    blocks: [Range<usize>; 3],
}

impl TextEncoder {
    fn new(pb: &ParamBuilder, cfg: &BackboneConfig, vocab_size: usize, text_len: usize) -> Result<Self> {
        let d = cfg.text_dim;
        let layers = (0..cfg.text_layers)
            .map(|i| {
                EncoderLayer::new(
                    &pb.pp(format!("layer{i}")),
                    d,
                    cfg.text_heads,
                    cfg.text_ffn_expansion,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens: Embedding::new(&pb.pp("tokens"), vocab_size, d)?,
            positions: pb.get((text_len, d), "positions", Init::Normal { std: 0.1 })?,
            layers,
            final_norm: LayerNorm::new(&pb.pp("final_norm"), d)?,
            projection: Linear::new(&pb.pp("projection"), d, cfg.global_dim)?,
            blocks: split_blocks(cfg.text_layers),
        })
    }

    fn forward(&self, ids: &Tensor, pad_id: u32) -> Result<(Vec<TokenFeatures>, GlobalTextFeature)> {
        let (b, n) = ids.dims2()?;
        let mask = causal_mask(n, self.positions.dtype(), self.positions.device())?;
        let ctx = Ctx::eval();
        let mut h = self.tokens.forward(ids)?.broadcast_add(&self.positions)?;
        let mut blocks = Vec::with_capacity(3);
        for (i, range) in self.blocks.iter().enumerate() {
            for layer in &self.layers[range.clone()] {
                h = layer.forward(&h, Some(&mask), &ctx)?;
            }
            blocks.push(TokenFeatures {
                block_index: i + 1,
                data: h.clone(),
            });
        }
        // Global feature from the last non-padding position of each sequence.
        let rows = ids.to_vec2::<u32>()?;
        let picks: Vec<u32> = rows
            .iter()
            .enumerate()
            .map(|(bi, row)| {
                let last = row.iter().rposition(|&t| t != pad_id).unwrap_or(0);
                (bi * n + last) as u32
            })
            .collect();
        let picks = Tensor::from_vec(picks, b, ids.device())?;
        let d = h.dims()[2];
        let pooled = self
            .final_norm
            .forward(&h)?
            .reshape((b * n, d))?
            .index_select(&picks, 0)?;
        let tau = self.projection.forward(&pooled)?;
        Ok((blocks, GlobalTextFeature { data: tau }))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    image: ImageEncoder,
    text: TextEncoder,
    vocab_size: usize,
    text_len: usize,
    pad_id: u32,
}

impl Backbone {
    /// Builds under the `backbone` namespace of `pb`. Parameters are trainable
    /// only when `cfg.frozen` is false.
    pub fn new(
        pb: &ParamBuilder,
        cfg: &BackboneConfig,
        vocab_size: usize,
        text_len: usize,
        pad_id: u32,
    ) -> Result<Self> {
        let pb = pb.pp(NAMESPACE).trainable(!cfg.frozen);
        Ok(Self {
            cfg: cfg.clone(),
            image: ImageEncoder::new(&pb.pp("image"), cfg)?,
            text: TextEncoder::new(&pb.pp("text"), cfg, vocab_size, text_len)?,
            vocab_size,
            text_len,
            pad_id,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// `images` is `[B, C_in, H_in, W_in]`.
    pub fn encode_image(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        let s = self.cfg.image_size;
        let expected = [self.cfg.in_channels, s, s];
        if images.rank() != 4 || images.dims()[1..] != expected {
            return Err(Error::shape(
                "encode_image input (C_in, H_in, W_in)",
                expected,
                images.dims().get(1..).unwrap_or(images.dims()),
            ));
        }
        self.image.forward(images)
    }

    /// `ids` is `[B, N]` u32.
    pub fn encode_text(&self, ids: &Tensor) -> Result<(Vec<TokenFeatures>, GlobalTextFeature)> {
        let (_, n) = ids.dims2()?;
        if n != self.text_len {
            return Err(Error::shape("encode_text sequence length", self.text_len, n));
        }
        for row in ids.to_vec2::<u32>()? {
            if let Some(position) = row.iter().position(|&t| t as usize >= self.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    position,
                    id: row[position],
                    vocab_size: self.vocab_size,
                });
            }
        }
        self.text.forward(ids, self.pad_id)
    }
}

/// Names of backbone parameters that the optimizer may update.
pub fn trainable_parameters(store: &ParamStore) -> Vec<String> {
    let prefix = format!("{NAMESPACE}.");
    store
        .trainable_names()
        .into_iter()
        .filter(|n| n.starts_with(&prefix))
        .collect()
}

const MANIFEST_KEY: &str = "manifest";

/// Backbone weights keyed by parameter name (with the `backbone.` prefix).
#[derive(Debug)]
pub struct WeightArchive {
    pub tensors: HashMap<String, Tensor>,
}

/// Parses a weight archive: a safetensors file whose metadata entry
/// `manifest` maps backbone parameter names to tensor keys.
pub fn parse_weight_archive(bytes: &[u8]) -> Result<WeightArchive> {
    use candle_core::safetensors::Load;
    let st = safetensors::SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Checkpoint(format!("weight archive: {e}")))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("weight archive: {e}")))?;
    let manifest_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("weight archive has no manifest".into()))?;
    let manifest: std::collections::BTreeMap<String, String> = serde_json::from_str(manifest_json)
        .map_err(|e| Error::Checkpoint(format!("weight archive manifest: {e}")))?;
    let mut tensors = HashMap::new();
    for (name, key) in manifest {
        if !name.starts_with(&format!("{NAMESPACE}.")) {
            return Err(Error::Checkpoint(format!(
                "manifest entry `{name}` is outside the backbone namespace"
            )));
        }
        let view = st
            .tensor(&key)
            .map_err(|e| Error::Checkpoint(format!("manifest key `{key}`: {e}")))?;
        let t = view.load(&Device::Cpu)?;
        if !matches!(t.dtype(), DType::F32 | DType::F64 | DType::F16 | DType::BF16) {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` has non-float dtype {:?}",
                t.dtype()
            )));
        }
        tensors.insert(name, t);
    }
    Ok(WeightArchive { tensors })
}

pub fn load_weight_archive(path: &Path) -> Result<WeightArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_weight_archive(&bytes)
}

/// Writes every `backbone.*` tensor of `store` as a weight archive.
pub fn save_weight_archive(store: &ParamStore, path: &Path) -> Result<()> {
    let prefix = format!("{NAMESPACE}.");
    let tensors: Vec<(String, Tensor)> = store
        .tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with(&prefix))
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let manifest: std::collections::BTreeMap<&str, &str> =
        tensors.iter().map(|(n, _)| (n.as_str(), n.as_str())).collect();
    let mut meta = HashMap::new();
    meta.insert(
        MANIFEST_KEY.to_string(),
        serde_json::to_string(&manifest).expect("string map serializes"),
    );
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Expected `[C, H, W]` of a feature map, for diagnostics.
pub fn feature_dims(f: &FeatureMap) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = f.data.dims4()?;
    Ok((c, h, w))
}
