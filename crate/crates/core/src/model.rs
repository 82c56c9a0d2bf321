//! End-to-end assembly: backbone → adapter → fusion → decoder.
//!
//! The decoder position that predicts `w_{t+1}` cross-attends to visual
//! tokens computed with the text prefix `[SOS] w_1 .. w_t`, so teacher
//! forcing never shows the text encoder a token it is about to predict.

use std::collections::{BTreeSet, HashMap};

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, UniCrossAdapter};
use crate::backbone::{self, Backbone, BackboneConfig, BackboneVariant, FeatureMap};
use crate::decoder::{self, DecoderConfig, GenerationResult, Memory, ReportDecoder, TokenSequence, PAD_ID};
use crate::error::{Error, Result};
use crate::fusion::{self, Fusion, FusionConfig};
use crate::nn::ops::Ctx;
use crate::nn::{ParamBuilder, ParamStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoAdapter,
    NoPretrained,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_adapter" => Ok(Ablation::NoAdapter),
            "no_pretrained" => Ok(Ablation::NoPretrained),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none, no_adapter or no_pretrained)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoAdapter => "no_adapter",
            Ablation::NoPretrained => "no_pretrained",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Backbone configuration actually used under `ablation`.
    pub fn effective_backbone(&self, ablation: Ablation) -> Result<BackboneConfig> {
        let mut cfg = self.backbone.clone();
        match ablation {
            Ablation::NoPretrained => {
                cfg.variant = BackboneVariant::StandIn;
                cfg.weight_path = None;
                cfg.frozen = false;
            }
            _ if !cfg.frozen => {
                return Err(Error::Config(
                    "backbone.frozen = false is only allowed with ablation = \"no_pretrained\"".into(),
                ))
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn validate(&self, ablation: Ablation) -> Result<()> {
        self.effective_backbone(ablation)?.validate()?;
        self.adapter.validate()?;
        self.fusion.validate(self.decoder.model_dim)?;
        self.decoder.validate()
    }
}

pub struct Model {
    store: ParamStore,
    ablation: Ablation,
    backbone: Backbone,
    adapter: Option<UniCrossAdapter>,
    fusion: Fusion,
    decoder: ReportDecoder,
    device: Device,
    dtype: DType,
}

impl Model {
    /// Builds a model with parameters initialized from `seed`, or taken from
    /// `source` (every parameter must then be present). A pretrained backbone
    /// is read from its weight archive when no `source` is given.
    pub fn assemble(
        cfg: &ModelConfig,
        ablation: Ablation,
        vocab_size: usize,
        max_length: usize,
        seed: u64,
        dtype: DType,
        source: Option<&HashMap<String, Tensor>>,
    ) -> Result<Self> {
        cfg.validate(ablation)?;
        let bcfg = cfg.effective_backbone(ablation)?;
        let device = Device::Cpu;
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, seed, dtype, &device).with_source(source);
        let archive = match (source, bcfg.variant, &bcfg.weight_path) {
            (None, BackboneVariant::Pretrained, Some(path)) => Some(backbone::load_weight_archive(path)?.tensors),
            _ => None,
        };
        let backbone_pb = match &archive {
            Some(tensors) => pb.clone().with_source(Some(tensors)),
            None => pb.clone(),
        };
        let backbone = Backbone::new(&backbone_pb, &bcfg, vocab_size, max_length, PAD_ID)?;
        let adapter = match ablation {
            Ablation::NoAdapter => None,
            _ => Some(UniCrossAdapter::new(&pb, &cfg.adapter, bcfg.stage_channels, bcfg.text_dim)?),
        };
        let fusion = Fusion::new(&pb, &cfg.fusion, bcfg.stage_shapes(), bcfg.global_dim, cfg.decoder.model_dim)?;
        let decoder = ReportDecoder::new(&pb, &cfg.decoder, vocab_size, max_length)?;
        let model = Self {
            store,
            ablation,
            backbone,
            adapter,
            fusion,
            decoder,
            device,
            dtype,
        };
        model.check_trainable_partition()?;
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn decoder(&self) -> &ReportDecoder {
        &self.decoder
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Namespaces whose parameters the optimizer must update.
    pub fn trainable_namespaces(&self) -> Vec<&'static str> {
        let mut ns = Vec::new();
        if self.ablation == Ablation::NoPretrained {
            ns.push(backbone::NAMESPACE);
        }
        if self.adapter.is_some() {
            ns.push(adapter::NAMESPACE);
        }
        ns.extend([fusion::NAMESPACE, decoder::NAMESPACE]);
        ns
    }

    /// Trainable set must equal the union of the trainable namespaces.
    pub fn check_trainable_partition(&self) -> Result<()> {
        let trainable: BTreeSet<String> = self.store.trainable_names().into_iter().collect();
        let expected: BTreeSet<String> = self
            .trainable_namespaces()
            .iter()
            .flat_map(|ns| self.store.names_with_prefix(&format!("{ns}.")))
            .collect();
        if trainable != expected {
            let extra: Vec<_> = trainable.difference(&expected).take(3).collect();
            let missing: Vec<_> = expected.difference(&trainable).take(3).collect();
            return Err(Error::Config(format!(
                "trainable-set partition violated: unexpected {extra:?}, missing {missing:?}"
            )));
        }
        Ok(())
    }

    /// Visual features of the frozen (or ablated) image encoder.
    pub fn encode_images(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        self.backbone.encode_image(images)
    }

    /// Visual token memory `[R, M, D]` for `R` text prefixes; `rows[r]`
    /// selects the image of prefix `r`.
    pub fn memory(&self, visual: &[FeatureMap], rows: &[u32], prefixes: &[&[u32]], ctx: &Ctx) -> Result<Tensor> {
        let n = self.backbone.text_len();
        let mut flat = Vec::with_capacity(prefixes.len() * n);
        for p in prefixes {
            if p.len() > n {
                return Err(Error::shape("text prefix length", n, p.len()));
            }
            flat.extend_from_slice(p);
            flat.extend(std::iter::repeat_n(PAD_ID, n - p.len()));
        }
        let ids = Tensor::from_vec(flat, (prefixes.len(), n), &self.device)?;
        let (blocks, tau) = self.backbone.encode_text(&ids)?;
        let index = Tensor::from_slice(rows, rows.len(), &self.device)?;
        let visual: Vec<FeatureMap> = visual
            .iter()
            .map(|f| {
                Ok(FeatureMap {
                    scale_index: f.scale_index,
                    data: f.data.index_select(&index, 0)?,
                })
            })
            .collect::<Result<_>>()?;
        let visual = match &self.adapter {
            Some(a) => a.forward(&visual, &blocks, ctx, false)?.visual,
            None => visual,
        };
        self.fusion.forward(&visual, &tau, ctx)
    }

    /// Teacher-forced logits `[B, T, V]` for query ids `[B, T]`.
    pub fn logits(&self, images: &Tensor, query: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        let b = query.len();
        let t = query.first().map_or(0, Vec::len);
        if images.dim(0)? != b || query.iter().any(|q| q.len() != t) || t == 0 {
            return Err(Error::shape("teacher-forcing batch (B, T)", (images.dim(0)?, t), (b, t)));
        }
        let visual = self.encode_images(images)?;
        let mut rows = Vec::with_capacity(b * t);
        let mut prefixes: Vec<&[u32]> = Vec::with_capacity(b * t);
        for (bi, q) in query.iter().enumerate() {
            for end in 1..=t {
                rows.push(bi as u32);
                prefixes.push(&q[..end]);
            }
        }
        let mem = self.memory(&visual, &rows, &prefixes, ctx)?;
        let (_, m, d) = mem.dims3()?;
        let mem = Memory::PerPosition(mem.reshape((b, t, m, d))?);
        let flat: Vec<u32> = query.iter().flatten().copied().collect();
        let q = Tensor::from_vec(flat, (b, t), &self.device)?;
        self.decoder.logits(&mem, &q, ctx)
    }

    /// Query/target pairs for a batch, trimmed to the longest non-padding
    /// target so trailing `[PAD]` positions cost nothing.
    pub fn teacher_batch(sequences: &[TokenSequence]) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let used = sequences
            .iter()
            .map(|s| s.query_and_target().1.iter().rposition(|&t| t != PAD_ID).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        sequences
            .iter()
            .map(|s| {
                let (q, t) = s.query_and_target();
                (q[..used].to_vec(), t[..used].to_vec())
            })
            .unzip()
    }

    /// Mean per-sequence cross-entropy over non-padding targets.
    pub fn loss(&self, images: &Tensor, sequences: &[TokenSequence], ctx: &Ctx) -> Result<Tensor> {
        let (query, target) = Self::teacher_batch(sequences);
        let logits = self.logits(images, &query, ctx)?;
        let b = target.len();
        let t = target[0].len();
        let flat: Vec<u32> = target.into_iter().flatten().collect();
        let target = Tensor::from_vec(flat, (b, t), &self.device)?;
        decoder::teacher_forced_loss(&logits, &target)
    }

    /// Greedy reports for `images` `[B, C, H, W]`.
    pub fn generate(&self, images: &Tensor) -> Result<Vec<GenerationResult>> {
        let visual = self.encode_images(images)?;
        let b = images.dim(0)?;
        let rows: Vec<u32> = (0..b as u32).collect();
        let ctx = Ctx::eval();
        self.decoder.generate(b, |prefixes| {
            let views: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
            self.memory(&visual, &rows, &views, &ctx)
        })
    }

    /// First-position next-token distribution `[B, V]`, for diagnostics.
    pub fn first_step_distribution(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let query = vec![vec![decoder::SOS_ID]; b];
        let logits = self.logits(images, &query, &Ctx::eval())?;
        crate::nn::ops::softmax_last(&logits.i((.., 0))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{EOS_ID, SOS_ID};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.adapter.adapter_dim = 8;
        cfg.adapter.num_heads = 2;
        cfg.fusion.channels = 8;
        cfg.fusion.num_heads = 2;
        cfg.fusion.vit_layers = 1;
        cfg.decoder.model_dim = 16;
        cfg.decoder.num_layers = 1;
        cfg
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let store = ParamStore::new();
        ParamBuilder::new(&store, seed, DType::F32, &Device::Cpu)
            .get((b, 1, 32, 32), "img", crate::nn::Init::Uniform { bound: 1.0 })
            .unwrap()
    }

    #[test]
    fn trainable_sets_follow_the_ablation() {
        let names = |a| {
            let m = Model::assemble(&tiny(), a, 12, 8, 1, DType::F32, None).unwrap();
            let t = m.store().trainable_names();
            (
                t.iter().any(|n| n.starts_with("backbone.")),
                t.iter().any(|n| n.starts_with("adapter.")),
                m.store().names_with_prefix("adapter.").is_empty(),
            )
        };
        assert_eq!(names(Ablation::None), (false, true, false));
        assert_eq!(names(Ablation::NoAdapter), (false, false, true));
        assert_eq!(names(Ablation::NoPretrained), (true, true, false));
    }

    #[test]
    fn unfrozen_backbone_requires_no_pretrained() {
        let mut cfg = tiny();
        cfg.backbone.frozen = false;
        assert!(matches!(
            Model::assemble(&cfg, Ablation::None, 12, 8, 1, DType::F32, None),
            Err(Error::Config(_))
        ));
        assert!(Model::assemble(&cfg, Ablation::NoPretrained, 12, 8, 1, DType::F32, None).is_ok());
    }

    #[test]
    fn zero_init_adapter_matches_bypass() {
        let full = Model::assemble(&tiny(), Ablation::None, 12, 8, 3, DType::F32, None).unwrap();
        let bypass = Model::assemble(&tiny(), Ablation::NoAdapter, 12, 8, 3, DType::F32, None).unwrap();
        let img = images(2, 9);
        let q = vec![vec![SOS_ID, 5, 6, 7], vec![SOS_ID, 4, EOS_ID, PAD_ID]];
        let a = full.logits(&img, &q, &Ctx::eval()).unwrap();
        let b = bypass.logits(&img, &q, &Ctx::eval()).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn teacher_forcing_matches_generation_replay() {
        let m = Model::assemble(&tiny(), Ablation::None, 12, 8, 5, DType::F32, None).unwrap();
        let img = images(3, 2);
        let results = m.generate(&img).unwrap();
        for (bi, r) in results.iter().enumerate() {
            let one = img.narrow(0, bi, 1).unwrap();
            let q = vec![r.tokens.ids[..r.step_distributions.len()].to_vec()];
            let logits = m.logits(&one, &q, &Ctx::eval()).unwrap();
            let replay = crate::nn::ops::softmax_last(&logits).unwrap().to_vec3::<f32>().unwrap();
            for (s, row) in replay[0].iter().enumerate() {
                let p: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
                assert_eq!(decoder::argmax_lowest(&p), r.tokens.ids[s + 1]);
            }
        }
    }

    #[test]
    fn memory_for_a_prefix_ignores_later_tokens() {
        let m = Model::assemble(&tiny(), Ablation::None, 12, 8, 5, DType::F32, None).unwrap();
        let img = images(1, 4);
        let a = m.logits(&img, &[vec![SOS_ID, 5, 6]], &Ctx::eval()).unwrap();
        let b = m.logits(&img, &[vec![SOS_ID, 5, 9]], &Ctx::eval()).unwrap();
        let a = a.to_vec3::<f32>().unwrap();
        let b = b.to_vec3::<f32>().unwrap();
        assert_eq!(a[0][..2], b[0][..2]);
        assert_ne!(a[0][2], b[0][2]);
    }

    #[test]
    fn teacher_batch_trims_trailing_padding() {
        let s = vec![
            TokenSequence::new(vec![SOS_ID, 4, EOS_ID, PAD_ID, PAD_ID, PAD_ID]),
            TokenSequence::new(vec![SOS_ID, 4, 5, EOS_ID, PAD_ID, PAD_ID]),
        ];
        let (q, t) = Model::teacher_batch(&s);
        assert_eq!(q, vec![vec![SOS_ID, 4, EOS_ID], vec![SOS_ID, 4, 5]]);
        assert_eq!(t, vec![vec![4, EOS_ID, PAD_ID], vec![4, 5, EOS_ID]]);
    }

    #[test]
    fn adapter_is_a_small_fraction_of_a_clip_scale_backbone() {
        let bcfg = BackboneConfig {
            image_size: 224,
            in_channels: 3,
            stem_channels: 64,
            stage_channels: [512, 1024, 2048],
            text_dim: 512,
            text_layers: 12,
            text_heads: 8,
            global_dim: 1024,
            ..Default::default()
        };
        let backbone = bcfg.parameter_count(49_408, 77);
        let adapter = adapter::parameter_count(&AdapterConfig::default(), bcfg.stage_channels, bcfg.text_dim);
        assert!((adapter as f64) < 0.1 * backbone as f64, "{adapter} vs {backbone}");
    }
}
