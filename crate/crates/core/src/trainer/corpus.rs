//! Prepared-corpus artifacts: where they live, how `prepare` writes them and
//! how training and evaluation read them back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::data::image::load_image;
use crate::data::text::normalize;
use crate::data::{generate_synthetic_corpus, write_synthetic_corpus, DatasetName, Manifest, Split, Vocabulary};
use crate::decoder::TokenSequence;
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub manifest: PathBuf,
    pub image_root: PathBuf,
    pub vocab: PathBuf,
}

impl CorpusPaths {
    pub fn for_config(cfg: &RunConfig) -> Self {
        let run_dir = cfg.run_dir();
        let (manifest, image_root) = match (&cfg.dataset.name, &cfg.dataset.manifest) {
            (DatasetName::Synthetic, _) | (_, None) => {
                let dir = run_dir.join("corpus");
                (dir.join("manifest.json"), dir)
            }
            (_, Some(m)) => {
                let root = cfg
                    .dataset
                    .image_root
                    .clone()
                    .unwrap_or_else(|| m.parent().map(Path::to_path_buf).unwrap_or_default());
                (m.clone(), root)
            }
        };
        Self {
            manifest,
            image_root,
            vocab: run_dir.join(VOCAB_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub paths: CorpusPaths,
    pub vocab_size: usize,
    pub split_sizes: BTreeMap<Split, usize>,
}

/// Training-split token streams of a manifest.
fn train_streams(manifest: &Manifest) -> Vec<Vec<String>> {
    manifest.train.iter().map(|e| normalize(&e.report)).collect()
}

/// Generates (synthetic) or validates (real) the corpus and writes the
/// vocabulary built from training-split reports.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let paths = CorpusPaths::for_config(cfg);
    let manifest = match cfg.dataset.name {
        DatasetName::Synthetic => {
            let corpus = generate_synthetic_corpus(cfg.dataset.synthetic_seed, cfg.dataset.synthetic_size)?;
            write_synthetic_corpus(&paths.image_root, &corpus)?
        }
        _ => Manifest::load(&paths.manifest)?,
    };
    manifest.examples(&paths.image_root)?;
    let mut streams = train_streams(&manifest);
    if cfg.dataset.consolidate_vocab {
        for other in &cfg.dataset.consolidate_with {
            streams.extend(train_streams(&Manifest::load(other)?));
        }
    }
    let vocab = Vocabulary::build(&streams, cfg.dataset.min_frequency)?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    std::fs::write(&paths.vocab, vocab.to_file_string()).map_err(|e| Error::io(&paths.vocab, e))?;
    Ok(PrepareSummary {
        paths,
        vocab_size: vocab.len(),
        split_sizes: manifest.split_sizes(),
    })
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub split: Split,
    /// Normalized report, cut to what fits in `max_length`.
    pub reference: String,
    pub tokens: TokenSequence,
    /// `[C, H, W]`.
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

impl Corpus {
    /// Reads the artifacts written by [`prepare`].
    pub fn load(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        let paths = CorpusPaths::for_config(cfg);
        for p in [&paths.vocab, &paths.manifest] {
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "{} not found; run `prepare` for this config first",
                    p.display()
                )));
            }
        }
        let text = std::fs::read_to_string(&paths.vocab).map_err(|e| Error::io(&paths.vocab, e))?;
        let vocab = Vocabulary::parse(&text)?;
        let manifest = Manifest::load(&paths.manifest)?;
        let examples = manifest
            .examples(&paths.image_root)?
            .into_iter()
            .map(|ex| {
                let b = &cfg.backbone;
                let image = load_image(&ex.image, b.in_channels, b.image_size, dtype, &Device::Cpu)?;
                Self::example(&vocab, ex.id, ex.split, &ex.report, image, cfg.dataset.max_length)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vocab, examples })
    }

    pub fn example(
        vocab: &Vocabulary,
        id: String,
        split: Split,
        report: &str,
        image: Tensor,
        max_length: usize,
    ) -> Result<Example> {
        let words = normalize(report);
        let reference = words[..words.len().min(max_length - 2)].join(" ");
        Ok(Example {
            id,
            split,
            reference,
            tokens: vocab.encode_report(report, max_length)?,
            image,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].split == split)
            .collect()
    }

    /// Keeps only the examples accepted by `keep`.
    pub fn retain(&mut self, keep: impl FnMut(&Example) -> bool) {
        self.examples.retain(keep);
    }

    /// Stacked images `[B, C, H, W]` and token sequences for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<TokenSequence>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.examples[i].image).collect();
        let tokens = indices.iter().map(|&i| self.examples[i].tokens.clone()).collect();
        Ok((Tensor::stack(&images, 0)?, tokens))
    }
}
