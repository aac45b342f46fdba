use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A sentence with its gold segmentation. Spans are half-open character
/// ranges that tile `0..chars.len()` in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentedSentence {
    chars: Vec<char>,
    spans: Vec<(usize, usize)>,
}

impl SegmentedSentence {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut chars = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let start = chars.len();
            chars.extend(w.as_ref().chars());
            if chars.len() == start {
                return Err(Error::Contract("empty word".into()));
            }
            spans.push((start, chars.len()));
        }
        Ok(SegmentedSentence { chars, spans })
    }

    /// Validates that `spans` tile the characters.
    pub fn from_spans(chars: Vec<char>, spans: Vec<(usize, usize)>) -> Result<Self> {
        let mut at = 0;
        for &(a, b) in &spans {
            if a != at || b <= a {
                return Err(Error::Contract(format!("span ({a}, {b}) does not continue at {at}")));
            }
            at = b;
        }
        if at != chars.len() {
            return Err(Error::Contract(format!(
                "spans cover {at} of {} characters",
                chars.len()
            )));
        }
        Ok(SegmentedSentence { chars, spans })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn words(&self) -> Vec<String> {
        self.spans
            .iter()
            .map(|&(a, b)| self.chars[a..b].iter().collect())
            .collect()
    }

    pub fn word_lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|&(a, b)| b - a).collect()
    }

    /// The line this sentence occupies in a corpus file.
    pub fn to_line(&self) -> String {
        self.words().join(" ")
    }
}

/// Parses corpus text: one sentence per line, words separated by single
/// ASCII spaces, blank lines skipped. `origin` labels parse errors.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<SegmentedSentence>> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if line.contains('\r') {
            return Err(Error::parse(origin, lineno, "carriage return in line"));
        }
        if line.starts_with(' ') || line.ends_with(' ') {
            return Err(Error::parse(origin, lineno, "leading or trailing space"));
        }
        let words: Vec<&str> = line.split(' ').collect();
        if words.iter().any(|w| w.is_empty()) {
            return Err(Error::parse(origin, lineno, "consecutive spaces"));
        }
        out.push(SegmentedSentence::from_words(&words)?);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<SegmentedSentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn format_corpus(corpus: &[SegmentedSentence]) -> String {
    let mut s = String::new();
    for sentence in corpus {
        s.push_str(&sentence.to_line());
        s.push('\n');
    }
    s
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[SegmentedSentence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_corpus(corpus)).map_err(|e| Error::io(path, e))
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded shuffle, then the first `⌊fraction·n⌋` sentences. Smaller
/// fractions under the same seed are prefixes of larger ones.
pub fn subsample(corpus: &[SegmentedSentence], fraction: f64, seed: u64) -> Result<Vec<SegmentedSentence>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} not in (0, 1]")));
    }
    let keep = fraction_count(corpus.len(), fraction);
    Ok(shuffled_indices(corpus.len(), seed)
        .into_iter()
        .take(keep)
        .map(|i| corpus[i].clone())
        .collect())
}

/// `⌊fraction·n⌋`, immune to representation error such as `0.7 * 10`.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}
