//! Declarative run configuration (TOML) with per-dataset defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::data::synthetic;
use crate::data::DatasetName;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{Ablation, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub max_length: usize,
    pub min_frequency: usize,
    /// Count vocabulary frequencies over the training splits of
    /// `consolidate_with` as well.
    pub consolidate_vocab: bool,
    pub consolidate_with: Vec<PathBuf>,
    /// Annotation manifest for real datasets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the manifest's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let (max_length, min_frequency) = DatasetName::Synthetic.text_defaults();
        Self {
            name: DatasetName::Synthetic,
            max_length,
            min_frequency,
            consolidate_vocab: false,
            consolidate_with: Vec::new(),
            manifest: None,
            image_root: None,
            synthetic_size: 100,
            synthetic_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_dataset(DatasetName::Synthetic)
    }
}

impl TrainConfig {
    pub fn for_dataset(name: DatasetName) -> Self {
        let (learning_rate, weight_decay, dropout, epochs) = match name {
            DatasetName::IuXray => (1e-5, 5e-5, 0.09, 100),
            DatasetName::MimicCxr => (1e-5, 4e-5, 0.1, 30),
            DatasetName::Synthetic => (2e-3, 5e-5, 0.0, 20),
        };
        Self {
            learning_rate,
            weight_decay,
            dropout,
            batch_size: 16,
            epochs,
            seed: 7,
            ablation: Ablation::None,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_dataset(DatasetName::Synthetic)
    }
}

/// Keys whose default depends on `dataset.name`.
const DATASET_KEYS: [(&str, &str); 8] = [
    ("dataset", "max_length"),
    ("dataset", "min_frequency"),
    ("train", "learning_rate"),
    ("train", "weight_decay"),
    ("train", "dropout"),
    ("train", "epochs"),
    ("fusion", "vit_layers"),
    ("decoder", "num_layers"),
];

impl RunConfig {
    pub fn for_dataset(name: DatasetName) -> Self {
        let (max_length, min_frequency) = name.text_defaults();
        let depth = match name {
            DatasetName::IuXray => 3,
            DatasetName::MimicCxr => 6,
            DatasetName::Synthetic => 2,
        };
        Self {
            run_name: "run".into(),
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig {
                name,
                max_length,
                min_frequency,
                ..DatasetConfig::default()
            },
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            fusion: FusionConfig {
                vit_layers: depth,
                ..FusionConfig::default()
            },
            decoder: DecoderConfig {
                num_layers: depth,
                ..DecoderConfig::default()
            },
            train: TrainConfig::for_dataset(name),
        }
    }

    /// Parses a config document. Keys absent from the document take the
    /// defaults of its `dataset.name`; relative paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Like [`RunConfig::parse`], with `key.path=value` overrides applied on
    /// top of the document. Values are TOML literals; bare words are strings.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // Reject unknown or ill-typed keys with positions from the original document.
        toml::from_str::<RunConfig>(text).map_err(|e| Error::Config(e.to_string()))?;
        if overrides.is_empty() {
            return Self::from_table(table, text);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table, &merged).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("after --set overrides: {msg}")),
            other => other,
        })
    }

    fn from_table(table: toml::Table, text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let defaults = Self::for_dataset(cfg.dataset.name);
        let set = |section: &str, key: &str| {
            table
                .get(section)
                .and_then(toml::Value::as_table)
                .is_some_and(|t| t.contains_key(key))
        };
        for (section, key) in DATASET_KEYS {
            if set(section, key) {
                continue;
            }
            match (section, key) {
                ("dataset", "max_length") => cfg.dataset.max_length = defaults.dataset.max_length,
                ("dataset", "min_frequency") => cfg.dataset.min_frequency = defaults.dataset.min_frequency,
                ("train", "learning_rate") => cfg.train.learning_rate = defaults.train.learning_rate,
                ("train", "weight_decay") => cfg.train.weight_decay = defaults.train.weight_decay,
                ("train", "dropout") => cfg.train.dropout = defaults.train.dropout,
                ("train", "epochs") => cfg.train.epochs = defaults.train.epochs,
                ("fusion", "vit_layers") => cfg.fusion.vit_layers = defaults.fusion.vit_layers,
                ("decoder", "num_layers") => cfg.decoder.num_layers = defaults.decoder.num_layers,
                _ => unreachable!("every dataset key is handled"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            adapter: self.adapter.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name == ".." {
            return bad(format!("run_name {:?} must be a plain directory name", self.run_name));
        }
        let d = &self.dataset;
        if d.max_length < 3 {
            return bad(format!("dataset.max_length must be at least 3, got {}", d.max_length));
        }
        if d.consolidate_vocab && d.consolidate_with.is_empty() {
            return bad("dataset.consolidate_vocab = true needs dataset.consolidate_with manifests".into());
        }
        if !d.consolidate_vocab && !d.consolidate_with.is_empty() {
            return bad("dataset.consolidate_with is set but dataset.consolidate_vocab = false".into());
        }
        match d.name {
            DatasetName::Synthetic => {
                if !(synthetic::MIN_SIZE..=synthetic::MAX_SIZE).contains(&d.synthetic_size) {
                    return bad(format!(
                        "dataset.synthetic_size must be in {}..={}, got {}",
                        synthetic::MIN_SIZE,
                        synthetic::MAX_SIZE,
                        d.synthetic_size
                    ));
                }
                if d.manifest.is_some() {
                    return bad("dataset.manifest is not used by the synthetic dataset".into());
                }
            }
            _ if d.manifest.is_none() => {
                return bad("dataset.manifest is required for real datasets".into());
            }
            _ => {}
        }
        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return bad(format!("train.learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be non-negative, got {}", t.weight_decay));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return bad(format!("train.dropout must be in [0, 1), got {}", t.dropout));
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(t.grad_clip.is_finite() && t.grad_clip > 0.0) {
            return bad(format!("train.grad_clip must be positive, got {}", t.grad_clip));
        }
        self.model().validate(t.ablation)
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {assignment:?}: expected key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("--set {assignment:?}: empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {assignment:?}: `{k}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
