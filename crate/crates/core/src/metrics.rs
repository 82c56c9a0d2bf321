//! Corpus BLEU, ROUGE-L and exact-match METEOR over pre-tokenized text.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const SENTENCE_BLEU_EPSILON: f64 = 0.1;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total for one pair.
fn clipped<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU-1..`max_n` with clipped n-gram precision, geometric averaging
/// and a corpus-level brevity penalty. No smoothing: an order with zero
/// matches scores 0.
pub fn bleu<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::shape("bleu corpus size", references.len(), candidates.len()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=max_n {
            let (m, t) = clipped(cand, refr, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    Ok(geometric_scores(&matches, &totals, brevity_penalty(c, r), None))
}

fn geometric_scores(matches: &[usize], totals: &[usize], bp: f64, epsilon: Option<f64>) -> Vec<f64> {
    let mut log_sum = 0.0;
    let mut zero = false;
    let mut out = Vec::with_capacity(matches.len());
    for (n, (&m, &t)) in matches.iter().zip(totals).enumerate() {
        let p = match (t, m, epsilon) {
            (0, _, _) => 0.0,
            (t, 0, Some(eps)) => eps / t as f64,
            (t, m, _) => m as f64 / t as f64,
        };
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    out
}

/// Sentence-level BLEU for per-example display; zero-match orders use
/// `epsilon / total` in place of 0 so the logarithm stays finite.
pub fn sentence_bleu<T: AsRef<str>>(candidate: &[T], reference: &[T], max_n: usize) -> Vec<f64> {
    let (matches, totals): (Vec<_>, Vec<_>) = (1..=max_n).map(|n| clipped(candidate, reference, n)).unzip();
    let bp = brevity_penalty(candidate.len(), reference.len());
    geometric_scores(&matches, &totals, bp, Some(SENTENCE_BLEU_EPSILON))
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure with recall weighted by `beta` = 1.2.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    let c: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let lcs = lcs_length(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fragmentation {
    /// `0.5 * ((chunks - 1) / (matches - 1))^3`: zero for a single chunk.
    #[default]
    Normalized,
    /// `0.5 * (chunks / matches)^3`.
    Standard,
}

/// Exact-match alignment: a maximum set of one-to-one token matches, chosen
/// left to right and preferring to extend the current chunk. Returns
/// `(matches, chunks)`.
pub fn meteor_alignment<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> (usize, usize) {
    let mut free: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in reference.iter().enumerate().rev() {
        free.entry(t.as_ref()).or_default().push(j);
    }
    let mut used = vec![false; reference.len()];
    let mut aligned: Vec<usize> = Vec::new();
    for t in candidate {
        let Some(slots) = free.get_mut(t.as_ref()) else { continue };
        let next = aligned.last().map(|&p| p + 1);
        let pick = match next {
            Some(n) if n < reference.len() && !used[n] && reference[n].as_ref() == t.as_ref() => {
                slots.retain(|&j| j != n);
                Some(n)
            }
            _ => slots.pop(),
        };
        if let Some(j) = pick {
            used[j] = true;
            aligned.push(j);
        }
    }
    let chunks = aligned
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i == 0 || aligned[i - 1] + 1 != j)
        .count();
    (aligned.len(), chunks)
}

/// METEOR with exact matching only: `F_mean * (1 - penalty)` where
/// `F_mean = 10PR / (R + 9P)`.
pub fn meteor<T: AsRef<str>>(candidate: &[T], reference: &[T], fragmentation: Fragmentation) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let frag = match fragmentation {
        Fragmentation::Standard => chunks as f64 / m as f64,
        Fragmentation::Normalized if m == 1 => 0.0,
        Fragmentation::Normalized => (chunks - 1) as f64 / (m - 1) as f64,
    };
    fmean * (1.0 - 0.5 * frag.powi(3))
}

fn whitespace_tokens<S: AsRef<str>>(texts: &[S]) -> Vec<Vec<&str>> {
    texts.iter().map(|s| s.as_ref().split_whitespace().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

/// Corpus scores: BLEU-1..4 at corpus level, ROUGE-L and METEOR averaged
/// over examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub examples: Vec<ExampleScore>,
}

impl ScoreReport {
    pub const METRICS: [&'static str; 6] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR"];

    /// Scores whitespace-tokenized texts, paired by position.
    pub fn compute<S: AsRef<str>>(ids: &[S], candidates: &[S], references: &[S]) -> Result<Self> {
        Self::compute_with(ids, candidates, references, Fragmentation::default())
    }

    pub fn compute_with<S: AsRef<str>>(
        ids: &[S],
        candidates: &[S],
        references: &[S],
        fragmentation: Fragmentation,
    ) -> Result<Self> {
        if ids.len() != candidates.len() || candidates.len() != references.len() {
            return Err(Error::Data(format!(
                "score inputs differ in length: {} ids, {} candidates, {} references",
                ids.len(),
                candidates.len(),
                references.len()
            )));
        }
        let cands = whitespace_tokens(candidates);
        let refs = whitespace_tokens(references);
        let b = bleu(&cands, &refs, 4)?;
        let examples: Vec<ExampleScore> = ids
            .iter()
            .zip(cands.iter().zip(&refs))
            .map(|(id, (c, r))| ExampleScore {
                id: id.as_ref().to_owned(),
                bleu_4: sentence_bleu(c, r, 4)[3],
                rouge_l: rouge_l(c, r),
                meteor: meteor(c, r, fragmentation),
            })
            .collect();
        let mean = |f: fn(&ExampleScore) -> f64| {
            if examples.is_empty() {
                0.0
            } else {
                examples.iter().map(f).sum::<f64>() / examples.len() as f64
            }
        };
        Ok(Self {
            bleu: [b[0], b[1], b[2], b[3]],
            rouge_l: mean(|e| e.rouge_l),
            meteor: mean(|e| e.meteor),
            examples,
        })
    }

    pub fn rows(&self) -> [(&'static str, f64); 6] {
        let v = [self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.rouge_l, self.meteor];
        let mut out = [("", 0.0); 6];
        for (i, name) in Self::METRICS.iter().enumerate() {
            out[i] = (name, v[i]);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = String::from("metric   score\n");
        for (name, v) in self.rows() {
            let _ = writeln!(s, "{name:<8} {v:.4}");
        }
        s
    }

    /// One JSON object per metric row, in table order.
    pub fn rows_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.rows()
                .iter()
                .map(|(name, v)| serde_json::json!({ "metric": name, "score": v }))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        let c = vec![t("the heart is normal in size"), t("no acute disease")];
        assert_eq!(bleu(&c, &c, 4).unwrap(), vec![1.0; 4]);
        let d = vec![t("x y z w"), t("q r")];
        assert_eq!(bleu(&d, &c, 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn bleu_clips_repeated_unigrams() {
        let c = vec![t("the the the the")];
        let r = vec![t("the cat")];
        let (m, total) = clipped(&c[0], &r[0], 1);
        assert_eq!((m, total), (1, 4));
        // c = 4 > r = 2, so no brevity penalty.
        let b = bleu(&c, &r, 4).unwrap();
        assert!((b[0] - 0.25).abs() < 1e-9);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn brevity_penalty_uses_corpus_lengths() {
        let c = vec![t("a b"), t("c d e")];
        let r = vec![t("a b x"), t("c d e y")];
        let b = bleu(&c, &r, 1).unwrap();
        assert!((b[0] - (1.0 - 7.0 / 5.0f64).exp()).abs() < 1e-12);
        assert_eq!(bleu::<&str>(&[vec![]], &[t("a")], 4).unwrap(), vec![0.0; 4]);
    }

    /// Corpus BLEU order monotonicity is not a theorem: BLEU-(n+1) exceeds
    /// BLEU-n whenever p_(n+1) is above the geometric mean of p_1..p_n.
    #[test]
    fn bleu_order_monotonicity_can_fail() {
        let c = vec![t("a b"), t("b a b b"), t("a")];
        let r = vec![t("a a a b"), t("a b b a"), t("a b b")];
        let b = bleu(&c, &r, 4).unwrap();
        assert!(b[1] > b[0], "{b:?}");
    }

    #[test]
    fn rouge_l_hand_cases() {
        assert_eq!(rouge_l(&t("a b c"), &t("a b c")), 1.0);
        let (p, r) = (1.0, 2.0 / 3.0);
        let b2 = 1.44;
        let expected = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&t("a c"), &t("a b c")) - expected).abs() < 1e-12);
        assert_eq!(lcs_length(&t("a b c"), &t("c b a")), 1);
        assert_eq!(rouge_l::<&str>(&[], &t("a")), 0.0);
    }

    #[test]
    fn meteor_hand_cases() {
        let same = t("the lungs are clear bilaterally");
        assert!((meteor(&same, &same, Fragmentation::Normalized) - 1.0).abs() < 1e-6);
        let standard = meteor(&same, &same, Fragmentation::Standard);
        assert!((standard - (1.0 - 0.5 / 125.0)).abs() < 1e-12);
        assert_eq!(meteor(&t("x y"), &t("a b"), Fragmentation::Normalized), 0.0);
        let swapped = meteor(&t("b a"), &t("a b"), Fragmentation::Normalized);
        assert!((swapped - 0.5).abs() < 1e-12);
        assert!(swapped < meteor(&t("a b"), &t("a b"), Fragmentation::Normalized));
        assert_eq!(meteor_alignment(&t("a b c a"), &t("c a b")), (3, 2));
    }

    #[test]
    fn report_has_six_rows() {
        let ids = ["1", "2"];
        let texts = ["heart size is normal .", "no pleural effusion ."];
        let r = ScoreReport::compute(&ids, &texts, &texts).unwrap();
        assert_eq!(r.rows().len(), 6);
        assert!(r.rows().iter().all(|(_, v)| (*v - 1.0).abs() < 1e-6));
        assert_eq!(r.table().lines().count(), 7);
        assert_eq!(r.rows_json().as_array().unwrap().len(), 6);
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..6).prop_map(|i| format!("w{i}")), 0..10)
    }

    proptest! {
        #[test]
        fn scores_are_bounded(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            for v in bleu(&c, &r, 4).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for (a, b) in c.iter().zip(&r) {
                for v in [rouge_l(a, b), meteor(a, b, Fragmentation::Normalized), meteor(a, b, Fragmentation::Standard)] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                for v in sentence_bleu(a, b, 4) {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn identity_scores_one(s in prop::collection::vec(sentence().prop_filter("nonempty", |v| !v.is_empty()), 1..5)) {
            prop_assert_eq!(bleu(&s, &s, 1).unwrap()[0], 1.0);
            for x in &s {
                prop_assert_eq!(rouge_l(x, x), 1.0);
                prop_assert!((meteor(x, x, Fragmentation::Normalized) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn lcs_matches_brute_force(a in prop::collection::vec(0u8..3, 0..8), b in prop::collection::vec(0u8..3, 0..8)) {
            let mut best = 0;
            for mask in 0u32..(1 << a.len()) {
                let sub: Vec<u8> = a.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &x)| x).collect();
                let mut it = b.iter();
                if sub.iter().all(|x| it.any(|y| y == x)) {
                    best = best.max(sub.len());
                }
            }
            prop_assert_eq!(lcs_length(&a, &b), best);
        }

        #[test]
        fn meteor_matches_are_maximal(a in sentence(), b in sentence()) {
            let (m, chunks) = meteor_alignment(&a, &b);
            let mut expected = 0;
            let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
            for x in &a { counts.entry(x).or_default().0 += 1; }
            for x in &b { counts.entry(x).or_default().1 += 1; }
            for (_, (x, y)) in counts { expected += x.min(y); }
            prop_assert_eq!(m, expected);
            prop_assert!(chunks <= m && (m == 0) == (chunks == 0));
        }
    }
}
