//! Text normalization and the character vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use crate::error::{Error, Result};

/// Stands in for a maximal run of decimal digits.
pub const NUM_FLAG: char = '\u{F0000}';
/// Stands in for a maximal run of Latin letters.
pub const LATIN_FLAG: char = '\u{F0001}';

pub const UNK_ID: usize = 0;
pub const NUM_ID: usize = 1;
pub const LATIN_ID: usize = 2;
const RESERVED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Digit,
    Latin,
    Other,
}

fn classify(c: char) -> Class {
    match c {
        '0'..='9' | '０'..='９' => Class::Digit,
        'a'..='z' | 'A'..='Z' | 'ａ'..='ｚ' | 'Ａ'..='Ｚ' => Class::Latin,
        _ => Class::Other,
    }
}

/// One normalized symbol and the range of source characters it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub ch: char,
    pub source: Range<usize>,
}

/// Collapses digit runs to [`NUM_FLAG`] and Latin-letter runs to
/// [`LATIN_FLAG`], keeping track of which input characters each output
/// symbol came from.
pub fn preprocess_chars(chars: &[char]) -> Vec<Symbol> {
    let mut out: Vec<Symbol> = Vec::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let class = classify(c);
        let flag = match class {
            Class::Digit => NUM_FLAG,
            Class::Latin => LATIN_FLAG,
            Class::Other => {
                out.push(Symbol {
                    ch: c,
                    source: i..i + 1,
                });
                continue;
            }
        };
        match out.last_mut() {
            Some(last) if last.ch == flag && last.source.end == i => last.source.end = i + 1,
            _ => out.push(Symbol {
                ch: flag,
                source: i..i + 1,
            }),
        }
    }
    out
}

pub fn preprocess(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    preprocess_chars(&chars).into_iter().map(|s| s.ch).collect()
}

/// Normalizes a segmented sentence word by word, so that no collapsed run
/// crosses a word boundary. Returns the symbols and each word's length in
/// symbols.
pub fn preprocess_words<S: AsRef<str>>(words: &[S]) -> (Vec<char>, Vec<usize>) {
    let mut symbols = Vec::new();
    let mut lengths = Vec::with_capacity(words.len());
    for w in words {
        let before = symbols.len();
        symbols.extend(preprocess(w.as_ref()).chars());
        lengths.push(symbols.len() - before);
    }
    (symbols, lengths)
}

/// Dense character ids. Ids 0, 1, 2 are reserved for UNK and the two
/// run flags; every other known character follows in code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl CharVocab {
    /// Builds the vocabulary over already preprocessed symbols.
    pub fn from_symbols<I: IntoIterator<Item = char>>(symbols: I) -> Self {
        let set: BTreeSet<char> = symbols
            .into_iter()
            .filter(|&c| c != NUM_FLAG && c != LATIN_FLAG)
            .collect();
        Self::from_ordered(set.into_iter().collect()).expect("set has no duplicates")
    }

    /// Rebuilds a vocabulary from its non-reserved characters in id order.
    pub fn from_ordered(chars: Vec<char>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(chars.len() + 2);
        ids.insert(NUM_FLAG, NUM_ID);
        ids.insert(LATIN_FLAG, LATIN_ID);
        for (i, &c) in chars.iter().enumerate() {
            if ids.insert(c, RESERVED + i).is_some() {
                return Err(Error::Config(format!(
                    "vocabulary lists U+{:04X} twice or shadows a flag",
                    c as u32
                )));
            }
        }
        Ok(CharVocab { chars, ids })
    }

    pub fn len(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved characters in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Id of a preprocessed symbol; unseen characters map to UNK.
    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn ids(&self, symbols: &[char]) -> Vec<usize> {
        symbols.iter().map(|&c| self.id(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_runs() {
        let expect: String = [LATIN_FLAG, NUM_FLAG, '北'].iter().collect();
        assert_eq!(preprocess("abc123北"), expect);
        assert_eq!(preprocess("北京"), "北京");
        let expect: String = [LATIN_FLAG, NUM_FLAG, LATIN_FLAG].iter().collect();
        assert_eq!(preprocess("a1a"), expect);
        assert_eq!(preprocess(""), "");
    }

    #[test]
    fn full_width_forms_are_collapsed() {
        let expect: String = [NUM_FLAG, '年', LATIN_FLAG].iter().collect();
        assert_eq!(preprocess("２０２４年ＡＢc"), expect);
    }

    #[test]
    fn symbols_remember_source_ranges() {
        let chars: Vec<char> = "x北12".chars().collect();
        let syms = preprocess_chars(&chars);
        assert_eq!(syms.len(), 3);
        assert_eq!(syms[0].source, 0..1);
        assert_eq!(syms[2].source, 2..4);
    }

    #[test]
    fn word_boundaries_cut_runs() {
        let (syms, lens) = preprocess_words(&["ab", "cd", "1"]);
        assert_eq!(syms, vec![LATIN_FLAG, LATIN_FLAG, NUM_FLAG]);
        assert_eq!(lens, vec![1, 1, 1]);
    }

    #[test]
    fn vocab_layout() {
        let v = CharVocab::from_symbols("北京北大".chars().chain([NUM_FLAG]));
        assert_eq!(v.len(), 6);
        assert_eq!(v.id(NUM_FLAG), NUM_ID);
        assert_eq!(v.id(LATIN_FLAG), LATIN_ID);
        assert_eq!(v.id('?'), UNK_ID);
        let ids: Vec<usize> = v.chars().iter().map(|&c| v.id(c)).collect();
        assert_eq!(ids, vec![3, 4, 5]);
        assert!(CharVocab::from_ordered(vec!['a', 'a']).is_err());
    }
}
