use std::collections::HashMap;
use std::fmt::Write as _;

use crate::decoder::{TokenSequence, EOS_ID, PAD_ID, SOS_ID, UNK_ID};
use crate::error::{Error, Result};

pub const RESERVED: [&str; 4] = ["[SOS]", "[EOS]", "[PAD]", "[UNK]"];

/// Lowercases, splits sentence periods into their own tokens and deletes all
/// other punctuation before whitespace tokenization.
pub fn normalize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c == '.' {
            cleaned.push_str(" . ");
        } else if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        }
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Normalized report rendered back as a single space-separated string.
pub fn normalized_text(text: &str) -> String {
    normalize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from one or more token streams. Tokens whose
    /// combined frequency is strictly greater than `min_frequency` are kept,
    /// ordered by descending frequency with alphabetical tie-breaking.
    pub fn build<'a, I, S>(streams: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in streams {
            for tok in stream.as_ref() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n > min_frequency && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("vocabulary line {}: invalid token {tok:?}", i + 1)));
            }
            if RESERVED.contains(&tok.as_str()) {
                return Err(Error::Data(format!("vocabulary line {}: reserved token {tok}", i + 1)));
            }
            let id = (i + RESERVED.len()) as u32;
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("vocabulary line {}: duplicate token {tok:?}", i + 1)));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Parses the on-disk form: one token per line, id = line index + 4.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Self::from_tokens(Vec::new());
        }
        Self::from_tokens(body.split('\n').map(str::to_owned).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    /// Total size including the reserved markers.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < RESERVED.len() {
            Some(RESERVED[i])
        } else {
            self.tokens.get(i - RESERVED.len()).map(String::as_str)
        }
    }

    /// `[SOS] w_1 .. w_k [EOS] [PAD]*` of length exactly `max_length`,
    /// keeping the longest report prefix that fits.
    pub fn encode_report(&self, text: &str, max_length: usize) -> Result<TokenSequence> {
        if max_length < 2 {
            return Err(Error::Config(format!("max_length must be at least 2, got {max_length}")));
        }
        let mut ids = Vec::with_capacity(max_length);
        ids.push(SOS_ID);
        ids.extend(normalize(text).iter().take(max_length - 2).map(|t| self.id(t)));
        ids.push(EOS_ID);
        ids.resize(max_length, PAD_ID);
        Ok(TokenSequence::new(ids))
    }

    /// Content tokens up to the first `[EOS]`, markers stripped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS_ID => break,
                SOS_ID | PAD_ID => {}
                _ => words.push(self.token(id).unwrap_or(RESERVED[UNK_ID as usize])),
            }
        }
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn normalization_keeps_periods_as_tokens() {
        assert_eq!(
            normalize("The heart-size is NORMAL. No effusion, (none)!"),
            toks("the heartsize is normal . no effusion none")
        );
        assert!(normalize("  ,;: ").is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        let v = Vocabulary::build([&toks("a a a a b")], 3).unwrap();
        assert_eq!(v.content_tokens(), &["a".to_string()]);
        let v = Vocabulary::build([&toks("a a a b b b b")], 3).unwrap();
        assert_eq!(v.content_tokens(), &["b".to_string()]);
    }

    #[test]
    fn ids_follow_frequency_then_alphabet() {
        let mut stream = Vec::new();
        for (tok, n) in [("q", 4), ("z", 9), ("m", 5), ("a", 9), ("c", 4), ("x", 3)] {
            stream.extend(std::iter::repeat_n(tok.to_string(), n));
        }
        let v = Vocabulary::build([&stream], 3).unwrap();
        // Brute force: an order is valid iff every adjacent pair respects (freq desc, alpha).
        let freq = |t: &str| stream.iter().filter(|s| *s == t).count();
        let mut expected: Vec<&str> = ["q", "z", "m", "a", "c"].to_vec();
        let mut sorted = false;
        while !sorted {
            sorted = true;
            for i in 1..expected.len() {
                let (p, c) = (expected[i - 1], expected[i]);
                if freq(p) < freq(c) || (freq(p) == freq(c) && p > c) {
                    expected.swap(i - 1, i);
                    sorted = false;
                }
            }
        }
        assert_eq!(v.content_tokens(), expected);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("x"), UNK_ID);
    }

    #[test]
    fn consolidation_equals_concatenation() {
        let a = toks("lung lung clear clear clear heart");
        let b = toks("heart heart heart lung lung clear");
        let joint = Vocabulary::build([&a, &b], 2).unwrap();
        let cat: Vec<String> = a.iter().chain(&b).cloned().collect();
        assert_eq!(joint, Vocabulary::build([&cat], 2).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let none: Vec<Vec<String>> = vec![vec![]];
        assert!(Vocabulary::build(&none, 0).is_err());
    }

    #[test]
    fn encoding_lengths() {
        let v = Vocabulary::build([&toks("w w w w")], 0).unwrap();
        assert_eq!(v.encode_report("", 4).unwrap().ids, vec![SOS_ID, EOS_ID, PAD_ID, PAD_ID]);
        let long = vec!["w"; 100].join(" ");
        for (max_len, kept) in [(60, 58), (78, 76)] {
            let s = v.encode_report(&long, max_len).unwrap();
            assert_eq!(s.len(), max_len);
            assert_eq!(s.content().len(), kept);
            assert_eq!(*s.ids.last().unwrap(), EOS_ID);
            assert_eq!(v.decode(&s.ids).split(' ').count(), kept);
        }
    }

    #[test]
    fn round_trip_and_file_format() {
        let corpus = toks("no acute disease . heart normal . no effusion . no");
        let v = Vocabulary::build([&corpus], 0).unwrap();
        let text = "heart normal . no effusion";
        assert_eq!(v.decode(&v.encode_report(text, 12).unwrap().ids), text);
        let file = v.to_file_string();
        assert!(file.starts_with(".\nno\n"));
        assert_eq!(Vocabulary::parse(&file).unwrap(), v);
        assert!(Vocabulary::parse("a\na\n").is_err());
        assert!(Vocabulary::parse("a\n\nb\n").is_err());
        assert!(Vocabulary::parse("[PAD]\n").is_err());
        assert_eq!(Vocabulary::parse("").unwrap().len(), 4);
    }
}
