//! Corpus ingestion: text normalization, vocabulary, manifests, images and
//! the synthetic corpus.

pub mod image;
pub mod manifest;
pub mod synthetic;
pub mod text;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{CorpusExample, Manifest, ManifestEntry, Split};
pub use synthetic::{generate_synthetic_corpus, write_synthetic_corpus, SyntheticExample};
pub use text::{normalize, normalized_text, Vocabulary};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    IuXray,
    MimicCxr,
    Synthetic,
}

impl DatasetName {
    /// `(max_length, min_frequency)` defaults for the dataset.
    pub fn text_defaults(self) -> (usize, usize) {
        match self {
            DatasetName::IuXray => (60, 3),
            DatasetName::MimicCxr => (78, 10),
            DatasetName::Synthetic => (24, 3),
        }
    }
}

/// Example indices grouped into batches for one epoch. The order depends
/// only on `(seed, epoch)`.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
