//! Single-file checkpoints: named tensors (model parameters under their
//! namespaces plus `optim.m.*` / `optim.v.*` moments) and one JSON metadata
//! entry with the config snapshot, vocabulary and progress counters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::{adapter, backbone, decoder, fusion};

pub const META_KEY: &str = "unicross";
pub const FORMAT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";
const NAMESPACES: [&str; 4] = [backbone::NAMESPACE, adapter::NAMESPACE, fusion::NAMESPACE, decoder::NAMESPACE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub epoch: usize,
    pub val_bleu_4: f64,
    pub val_loss: f64,
}

impl BestMetric {
    /// Higher BLEU-4 wins; equal BLEU-4 falls back to lower loss.
    pub fn improves_on(&self, other: Option<&BestMetric>) -> bool {
        match other {
            None => true,
            Some(o) => self.val_bleu_4 > o.val_bleu_4 || (self.val_bleu_4 == o.val_bleu_4 && self.val_loss < o.val_loss),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: RunConfig,
    pub vocabulary: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub optimizer_step: u64,
    pub best: Option<BestMetric>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: HashMap<String, Tensor>,
    pub optim_m: BTreeMap<String, Tensor>,
    pub optim_v: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.meta.vocabulary.clone())
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let cfg = &self.meta.config;
        let vocab = self.vocabulary()?;
        let dtype = self
            .params
            .values()
            .next()
            .map(Tensor::dtype)
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no parameters".into()))?;
        let model = Model::assemble(
            &cfg.model(),
            cfg.train.ablation,
            vocab.len(),
            cfg.dataset.max_length,
            cfg.train.seed,
            dtype,
            Some(&self.params),
        )?;
        let expected = model.store().entries().len();
        if expected != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {expected}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    /// Optimizer over `model`'s trainable parameters, restored to the saved state.
    pub fn optimizer(&self, model: &Model) -> Result<Adam> {
        let t = &self.meta.config.train;
        let mut opt = Adam::new(model.store().trainable(), t.learning_rate, t.weight_decay, Some(t.grad_clip))?;
        opt.load_state(self.meta.optimizer_step, self.optim_m.clone(), self.optim_v.clone())?;
        Ok(opt)
    }
}

pub fn to_bytes(model: &Model, optimizer: &Adam, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = model.store().tensors();
    let (m, v) = optimizer.state();
    tensors.extend(m.iter().map(|(k, t)| (format!("{OPTIM_M}{k}"), t.clone())));
    tensors.extend(v.iter().map(|(k, t)| (format!("{OPTIM_V}{k}"), t.clone())));
    let mut metadata = HashMap::new();
    metadata.insert(
        META_KEY.to_string(),
        serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(path: &Path, model: &Model, optimizer: &Adam, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, optimizer, meta)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(err)?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("missing `{META_KEY}` metadata entry")))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if meta.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
    }
    let st = safetensors::SafeTensors::deserialize(bytes).map_err(err)?;
    let mut ckpt = Checkpoint {
        meta,
        params: HashMap::new(),
        optim_m: BTreeMap::new(),
        optim_v: BTreeMap::new(),
    };
    for (name, view) in st.tensors() {
        let t = view.load(&Device::Cpu)?;
        if !t.dtype().is_float() {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not floating point")));
        }
        if let Some(rest) = name.strip_prefix(OPTIM_M) {
            ckpt.optim_m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(OPTIM_V) {
            ckpt.optim_v.insert(rest.to_string(), t);
        } else if NAMESPACES.iter().any(|ns| name.strip_prefix(ns).is_some_and(|r| r.starts_with('.'))) {
            ckpt.params.insert(name, t);
        } else {
            return Err(Error::Checkpoint(format!("tensor `{name}` is outside every known namespace")));
        }
    }
    Ok(ckpt)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
