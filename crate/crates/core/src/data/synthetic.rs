//! Desk-scale corpus of parametric shape images with template reports.
//!
//! Each 32×32 image is split into four quadrants, each holding one of five
//! findings. The report names the finding of every quadrant in a fixed
//! order, so the image→text mapping is fully determined and learnable.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::encode_png;
use super::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

pub const IMAGE_SIDE: u32 = 32;
pub const MIN_SIZE: usize = 10;
pub const QUADRANTS: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];
pub const FINDINGS: [&str; 5] = ["clear", "round opacity", "square density", "linear marking", "cross lesion"];
/// Number of distinct (and therefore maximum) examples.
pub const MAX_SIZE: usize = 625;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticExample {
    pub id: String,
    pub findings: [usize; 4],
    pub report: String,
    pub split: Split,
    pub image: GrayImage,
}

/// Split sizes for a corpus of `size` examples (70/10/20, test takes the
/// remainder).
pub fn split_sizes(size: usize) -> (usize, usize, usize) {
    let train = size * 7 / 10;
    let val = size / 10;
    (train, val, size - train - val)
}

pub fn report_for(findings: &[usize; 4]) -> String {
    QUADRANTS
        .iter()
        .zip(findings)
        .map(|(q, &f)| format!("{q} {} .", FINDINGS[f]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic corpus of `size` examples with distinct reports.
///
/// Combinations are enumerated in blocks of five in which every quadrant
/// sees every finding once; training examples are drawn block by block, so
/// each finding word occurs at least `4 * floor(train / 5)` times in the
/// training split.
pub fn generate_synthetic_corpus(seed: u64, size: usize) -> Result<Vec<SyntheticExample>> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(Error::Data(format!(
            "synthetic corpus size must be in {MIN_SIZE}..={MAX_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<[usize; 5]> = Vec::new();
    for _ in 0..4 {
        let mut perm = [0, 1, 2, 3, 4];
        perm.shuffle(&mut rng);
        labels.push(perm);
    }
    let mut blocks: Vec<usize> = (0..MAX_SIZE / 5).collect();
    blocks.shuffle(&mut rng);

    let (n_train, n_val, _) = split_sizes(size);
    let mut out = Vec::with_capacity(size);
    'outer: for block in blocks {
        let (d1, d2, d3) = (block % 5, (block / 5) % 5, block / 25);
        let mut order = [0, 1, 2, 3, 4];
        order.shuffle(&mut rng);
        for d0 in order {
            if out.len() == size {
                break 'outer;
            }
            let raw = [d0, (d0 + d1) % 5, (d0 + d1 + d2) % 5, (d0 + d1 + d2 + d3) % 5];
            let findings = [labels[0][raw[0]], labels[1][raw[1]], labels[2][raw[2]], labels[3][raw[3]]];
            let i = out.len();
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.push(SyntheticExample {
                id: format!("syn{i:04}"),
                findings,
                report: report_for(&findings),
                split,
                image: draw(&findings, &mut rng),
            });
        }
    }
    Ok(out)
}

fn draw(findings: &[usize; 4], rng: &mut ChaCha8Rng) -> GrayImage {
    let mut img = GrayImage::from_fn(IMAGE_SIDE, IMAGE_SIDE, |_, _| Luma([rng.random_range(20..=44)]));
    let half = IMAGE_SIDE / 2;
    for (q, &finding) in findings.iter().enumerate() {
        let x0 = (q as u32 % 2) * half;
        let y0 = (q as u32 / 2) * half;
        let cx = (x0 + half / 2) as i32 + rng.random_range(-1..=1);
        let cy = (y0 + half / 2) as i32 + rng.random_range(-1..=1);
        let level = rng.random_range(200..=240);
        for y in y0..y0 + half {
            for x in x0..x0 + half {
                let (dx, dy) = (x as i32 - cx, y as i32 - cy);
                let on = match finding {
                    0 => false,
                    1 => dx * dx + dy * dy <= 20,
                    2 => dx.abs() <= 4 && dy.abs() <= 4,
                    3 => (dx - dy).abs() <= 1 && dx.abs() <= 6,
                    _ => (dx.abs() <= 1 && dy.abs() <= 5) || (dy.abs() <= 1 && dx.abs() <= 5),
                };
                if on {
                    img.put_pixel(x, y, Luma([level]));
                }
            }
        }
    }
    img
}

/// Writes `images/<id>.png` files and `manifest.json` under `dir`.
pub fn write_synthetic_corpus(dir: &Path, examples: &[SyntheticExample]) -> Result<Manifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = Manifest::default();
    for ex in examples {
        let rel = format!("images/{}.png", ex.id);
        let path = dir.join(&rel);
        std::fs::write(&path, encode_png(&ex.image)?).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            id: ex.id.clone(),
            image_path: vec![rel],
            report: ex.report.clone(),
            split: Some(ex.split),
        };
        match ex.split {
            Split::Train => manifest.train.push(entry),
            Split::Val => manifest.val.push(entry),
            Split::Test => manifest.test.push(entry),
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::text::normalize;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn deterministic_and_split_70_10_20() {
        let a = generate_synthetic_corpus(7, 100).unwrap();
        assert_eq!(a, generate_synthetic_corpus(7, 100).unwrap());
        assert_ne!(a, generate_synthetic_corpus(8, 100).unwrap());
        let count = |s| a.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (70, 10, 20));
    }

    #[test]
    fn reports_are_distinct_across_the_corpus() {
        let all = generate_synthetic_corpus(3, MAX_SIZE).unwrap();
        let reports: HashSet<_> = all.iter().map(|e| e.report.as_str()).collect();
        assert_eq!(reports.len(), MAX_SIZE);
        assert!(generate_synthetic_corpus(3, MAX_SIZE + 1).is_err());
        assert!(generate_synthetic_corpus(3, 9).is_err());
    }

    #[test]
    fn every_template_word_clears_the_threshold_in_train() {
        let min_frequency = 3;
        for seed in 0..20 {
            for size in [10, 11, 17, 100] {
                let corpus = generate_synthetic_corpus(seed, size).unwrap();
                let mut counts: HashMap<String, usize> = HashMap::new();
                for ex in corpus.iter().filter(|e| e.split == Split::Train) {
                    for t in normalize(&ex.report) {
                        *counts.entry(t).or_default() += 1;
                    }
                }
                let vocab: HashSet<String> = QUADRANTS
                    .iter()
                    .chain(FINDINGS.iter())
                    .flat_map(|s| normalize(s))
                    .chain([".".to_string()])
                    .collect();
                for w in vocab {
                    let n = counts.get(&w).copied().unwrap_or(0);
                    assert!(n > min_frequency, "seed {seed} size {size}: {w:?} occurs {n} times");
                }
            }
        }
    }

    #[test]
    fn report_mentions_each_quadrant_in_order() {
        assert_eq!(
            report_for(&[0, 1, 2, 4]),
            "upper left clear . upper right round opacity . lower left square density . lower right cross lesion ."
        );
    }

    #[test]
    fn images_differ_by_finding() {
        let corpus = generate_synthetic_corpus(1, 10).unwrap();
        for ex in &corpus {
            let half = IMAGE_SIDE / 2;
            for (q, &f) in ex.findings.iter().enumerate() {
                let (x0, y0) = ((q as u32 % 2) * half, (q as u32 / 2) * half);
                let bright = (y0..y0 + half)
                    .flat_map(|y| (x0..x0 + half).map(move |x| (x, y)))
                    .filter(|&(x, y)| ex.image.get_pixel(x, y)[0] > 100)
                    .count();
                assert_eq!(bright == 0, f == 0, "{}: quadrant {q}", ex.id);
            }
        }
    }
}
