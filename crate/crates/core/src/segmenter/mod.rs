//! Domain-based character taggers and the inference path shared by every
//! predictor.

pub mod model;
pub mod tags;
pub mod vocab;

pub use model::{forward_logits, DomainModel, DomainVars, ModelDims};
pub use tags::{bmes_decode, bmes_encode, Tag, NUM_TAGS};
pub use vocab::{preprocess, preprocess_chars, preprocess_words, CharVocab, Symbol, LATIN_FLAG, NUM_FLAG};

use crate::error::Result;
use crate::tensor::{argmax, softmax};

/// Anything that turns a preprocessed symbol sequence into per-position
/// pre-softmax tag scores: a single domain model or a stacker.
pub trait Scorer {
    fn scores(&self, symbols: &[char]) -> Result<Vec<[f64; NUM_TAGS]>>;
}

impl Scorer for DomainModel {
    fn scores(&self, symbols: &[char]) -> Result<Vec<[f64; NUM_TAGS]>> {
        self.logits(symbols)
    }
}

/// Most probable tag per position; ties go to the lowest tag code.
pub fn decode_tags(scores: &[[f64; NUM_TAGS]]) -> Vec<Tag> {
    scores
        .iter()
        .map(|s| Tag::from_code(argmax(&softmax(s))).expect("tag index"))
        .collect()
}

/// Word spans over the original characters of `chars`.
pub fn predict_spans<S: Scorer + ?Sized>(scorer: &S, chars: &[char]) -> Result<Vec<(usize, usize)>> {
    if chars.is_empty() {
        return Ok(Vec::new());
    }
    let symbols = preprocess_chars(chars);
    let plain: Vec<char> = symbols.iter().map(|s| s.ch).collect();
    Ok(spans_from_scores(&symbols, &scorer.scores(&plain)?))
}

/// Decodes per-symbol scores into word spans over the symbols' source
/// characters.
pub fn spans_from_scores(symbols: &[Symbol], scores: &[[f64; NUM_TAGS]]) -> Vec<(usize, usize)> {
    bmes_decode(&decode_tags(scores))
        .into_iter()
        .map(|(a, b)| (symbols[a].source.start, symbols[b - 1].source.end))
        .collect()
}

/// Segments raw text. Normalization only affects lookup: the returned words
/// concatenate back to exactly `text`.
pub fn segment<S: Scorer + ?Sized>(scorer: &S, text: &str) -> Result<Vec<String>> {
    let chars: Vec<char> = text.chars().collect();
    Ok(predict_spans(scorer, &chars)?
        .into_iter()
        .map(|(a, b)| chars[a..b].iter().collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed tag per position, cycling through `tags`.
    struct Fixed(Vec<Tag>);

    impl Scorer for Fixed {
        fn scores(&self, symbols: &[char]) -> Result<Vec<[f64; NUM_TAGS]>> {
            Ok((0..symbols.len())
                .map(|i| {
                    let mut s = [0.0; NUM_TAGS];
                    s[self.0[i % self.0.len()].code()] = 1.0;
                    s
                })
                .collect())
        }
    }

    #[test]
    fn single_character_is_one_word() {
        for tag in Tag::ALL {
            assert_eq!(segment(&Fixed(vec![tag]), "北").unwrap(), vec!["北"]);
        }
    }

    #[test]
    fn empty_text_gives_no_words() {
        assert!(segment(&Fixed(vec![Tag::S]), "").unwrap().is_empty());
    }

    #[test]
    fn runs_map_back_to_source_characters() {
        // symbols: [LATIN] 北 [NUM] -> S S S
        let words = segment(&Fixed(vec![Tag::S]), "abc北123").unwrap();
        assert_eq!(words, vec!["abc", "北", "123"]);
        let words = segment(&Fixed(vec![Tag::B, Tag::E]), "abc北12京").unwrap();
        assert_eq!(words, vec!["abc北", "12京"]);
    }

    #[test]
    fn tied_scores_pick_b() {
        assert_eq!(decode_tags(&[[0.0; 4]]), vec![Tag::B]);
    }
}
