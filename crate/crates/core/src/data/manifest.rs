use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

/// One image paired with its report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusExample {
    pub id: String,
    pub image: PathBuf,
    pub report: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: Vec<String>,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Annotation file keyed by split, each holding `{id, image_path, report,
/// split}` records. Image paths are relative to the manifest's image root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub train: Vec<ManifestEntry>,
    #[serde(default)]
    pub val: Vec<ManifestEntry>,
    #[serde(default)]
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn split(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for entry in self.split(split) {
                if entry.id.is_empty() {
                    return Err(Error::Data(format!("empty example id in {split} split")));
                }
                if !seen.insert(entry.id.as_str()) {
                    return Err(Error::Data(format!("duplicate example id {:?}", entry.id)));
                }
                if entry.split.is_some_and(|s| s != split) {
                    return Err(Error::Data(format!(
                        "example {:?} is listed under {split} but tagged {}",
                        entry.id,
                        entry.split.unwrap()
                    )));
                }
                if entry.image_path.is_empty() {
                    return Err(Error::Data(format!("example {:?} has no image_path", entry.id)));
                }
            }
        }
        Ok(())
    }

    /// Flattens to one example per image; multi-image records get `_k`
    /// suffixes. Every image must exist under `image_root`.
    pub fn examples(&self, image_root: &Path) -> Result<Vec<CorpusExample>> {
        let mut out = Vec::new();
        for split in Split::ALL {
            for entry in self.split(split) {
                let many = entry.image_path.len() > 1;
                for (k, rel) in entry.image_path.iter().enumerate() {
                    let image = image_root.join(rel);
                    if !image.is_file() {
                        return Err(Error::Data(format!(
                            "example {:?}: image {} not found",
                            entry.id,
                            image.display()
                        )));
                    }
                    let id = if many { format!("{}_{k}", entry.id) } else { entry.id.clone() };
                    out.push(CorpusExample {
                        id,
                        image,
                        report: entry.report.clone(),
                        split,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        Split::ALL.iter().map(|&s| (s, self.split(s).len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "train": [{"id": "a", "image_path": ["a/0.png", "a/1.png"], "report": "clear .", "split": "train"}],
        "test": [{"id": "b", "image_path": ["b.png"], "report": "opacity ."}]
    }"#;

    #[test]
    fn parses_and_flattens_multi_image_records() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        for p in ["a/0.png", "a/1.png", "b.png"] {
            std::fs::write(dir.path().join(p), b"").unwrap();
        }
        let m = Manifest::parse(SAMPLE).unwrap();
        let ex = m.examples(dir.path()).unwrap();
        let ids: Vec<_> = ex.iter().map(|e| (e.id.as_str(), e.split)).collect();
        assert_eq!(ids, [("a_0", Split::Train), ("a_1", Split::Train), ("b", Split::Test)]);
        assert_eq!(Manifest::parse(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn missing_image_names_the_example() {
        let dir = tempfile::tempdir().unwrap();
        let err = Manifest::parse(SAMPLE).unwrap().examples(dir.path()).unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
    }

    #[test]
    fn rejects_inconsistent_records() {
        let dup = r#"{"train": [{"id": "a", "image_path": ["x"], "report": ""}],
                      "val": [{"id": "a", "image_path": ["y"], "report": ""}]}"#;
        assert!(Manifest::parse(dup).is_err());
        let mistagged = r#"{"val": [{"id": "a", "image_path": ["x"], "report": "", "split": "test"}]}"#;
        assert!(Manifest::parse(mistagged).is_err());
        let unknown = r#"{"train": [], "extra": []}"#;
        assert!(Manifest::parse(unknown).is_err());
        let no_image = r#"{"train": [{"id": "a", "image_path": [], "report": ""}]}"#;
        assert!(Manifest::parse(no_image).is_err());
    }
}
