use std::fmt;

use crate::data::corpus::SegmentedSentence;
use crate::error::{Error, Result};

/// Word-level precision, recall and F1 over a corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub sentences: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl fmt::Display for Prf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sentences={} P={:.4} R={:.4} F={:.4}",
            self.sentences, self.precision, self.recall, self.f1
        )
    }
}

/// Raw span counts; add them across sentences before dividing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    /// Both span lists must be sorted and tile the same length.
    pub fn of(gold: &[(usize, usize)], predicted: &[(usize, usize)]) -> Self {
        let (mut i, mut j, mut matched) = (0, 0, 0);
        while i < gold.len() && j < predicted.len() {
            let (g, p) = (gold[i], predicted[j]);
            if g == p {
                matched += 1;
            }
            // advance whichever span ends first (both when they end together)
            if g.1 <= p.1 {
                i += 1;
            }
            if p.1 <= g.1 {
                j += 1;
            }
        }
        SpanCounts {
            matched,
            predicted: predicted.len(),
            gold: gold.len(),
        }
    }

    pub fn add(&mut self, other: SpanCounts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn prf(&self, sentences: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.matched, self.predicted);
        let recall = ratio(self.matched, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            sentences,
            precision,
            recall,
            f1,
        }
    }
}

/// Scores predicted segmentations against gold ones, sentence by sentence.
pub fn f1_score(gold: &[SegmentedSentence], predicted: &[SegmentedSentence]) -> Result<Prf> {
    if gold.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut counts = SpanCounts::default();
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.chars() != p.chars() {
            return Err(Error::Contract(format!(
                "sentence {i}: predicted text differs from gold"
            )));
        }
        counts.add(SpanCounts::of(g.spans(), p.spans()));
    }
    Ok(counts.prf(gold.len()))
}
