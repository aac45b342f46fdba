//! Synthetic multi-domain corpora with controlled dataset bias.
//!
//! Three domains share one pseudo-character alphabet drawn from the Unicode
//! private-use area:
//!
//! * source domain A: shared words plus A-specific words; every conflict
//!   bigram is written as one word.
//! * source domain B: shared words plus B-specific words; every conflict
//!   bigram is written as two single-character words.
//! * target domain T: few sentences mixing shared, A and B words, following
//!   A's convention on conflict bigrams.
//!
//! Conflict bigrams are built from characters reserved for them, so a
//! sentence contains a conflict exactly when it contains a reserved
//! character.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::corpus::{shuffled_indices, SegmentedSentence};
use crate::error::{Error, Result};

/// First code point of the pseudo-character alphabet.
pub const ALPHABET_BASE: u32 = 0xE000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub alphabet_size: usize,
    /// Words common to every domain.
    pub shared_words: usize,
    /// Words specific to A, and separately to B.
    pub domain_words: usize,
    pub conflict_bigrams: usize,
    /// Relative frequency of word lengths 1, 2, 3, ...
    pub word_length_weights: Vec<f64>,
    /// Zipf exponent of word frequencies within each inventory.
    pub zipf_exponent: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Share of shared-inventory words in source sentences.
    pub source_shared_share: f64,
    /// Shares of shared, A-specific and B-specific words in target sentences.
    pub target_mix: [f64; 3],
    /// Fraction of source sentences carrying one conflict bigram.
    pub source_conflict_rate: f64,
    /// Fraction of target sentences carrying one conflict bigram.
    pub target_conflict_rate: f64,
    pub source_sentences: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            alphabet_size: 50,
            shared_words: 150,
            domain_words: 200,
            conflict_bigrams: 8,
            word_length_weights: vec![0.25, 0.5, 0.15, 0.1],
            zipf_exponent: 1.0,
            min_words: 4,
            max_words: 9,
            source_shared_share: 0.5,
            target_mix: [0.4, 0.3, 0.3],
            source_conflict_rate: 0.2,
            target_conflict_rate: 0.3,
            source_sentences: 5000,
            target_train: 200,
            target_test: 500,
        }
    }
}

/// Generated corpora for the two source domains and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpora {
    pub domain_a: Vec<SegmentedSentence>,
    pub domain_b: Vec<SegmentedSentence>,
    pub target_train: Vec<SegmentedSentence>,
    pub target_test: Vec<SegmentedSentence>,
    /// The conflict bigrams, each as its two characters.
    pub conflicts: Vec<[char; 2]>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let reserved = 2 * self.conflict_bigrams;
        if self.alphabet_size <= reserved {
            return fail(format!(
                "alphabet of {} leaves no characters beside {reserved} reserved for conflicts",
                self.alphabet_size
            ));
        }
        if self.word_length_weights.is_empty()
            || self.word_length_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite()))
            || self.word_length_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("word_length_weights must be non-negative with a positive sum".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail(format!(
                "bad sentence length range {}..={}",
                self.min_words, self.max_words
            ));
        }
        for (name, v) in [
            ("source_shared_share", self.source_shared_share),
            ("source_conflict_rate", self.source_conflict_rate),
            ("target_conflict_rate", self.target_conflict_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} not in [0, 1]"));
            }
        }
        if self.target_mix.iter().any(|&w| w.is_nan() || w < 0.0) || self.target_mix.iter().sum::<f64>() <= 0.0 {
            return fail("target_mix must be non-negative with a positive sum".into());
        }
        if self.zipf_exponent < 0.0 || !self.zipf_exponent.is_finite() {
            return fail(format!("zipf_exponent {} must be >= 0", self.zipf_exponent));
        }
        if self.shared_words == 0 || self.domain_words == 0 {
            return fail("word inventories must be non-empty".into());
        }
        if self.conflict_bigrams == 0 && (self.source_conflict_rate > 0.0 || self.target_conflict_rate > 0.0) {
            return fail("conflict rates need at least one conflict bigram".into());
        }
        let regular = (self.alphabet_size - reserved) as f64;
        let capacity: f64 = (1..=self.word_length_weights.len())
            .map(|len| regular.powi(len as i32))
            .sum();
        let wanted = (self.shared_words + 2 * self.domain_words) as f64;
        if wanted > capacity / 2.0 {
            return fail(format!(
                "{wanted} distinct words is too many for {regular} regular characters"
            ));
        }
        Ok(())
    }
}

struct Inventory {
    words: Vec<String>,
    weights: WeightedIndex<f64>,
}

impl Inventory {
    fn new(words: Vec<String>, zipf: f64) -> Self {
        let weights = (1..=words.len()).map(|r| (r as f64).powf(-zipf));
        Inventory {
            weights: WeightedIndex::new(weights).expect("non-empty inventory"),
            words,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> &str {
        &self.words[self.weights.sample(rng)]
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Convention {
    Joined,
    Split,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
    shared: Inventory,
    only_a: Inventory,
    only_b: Inventory,
    conflicts: Vec<[char; 2]>,
}

impl Generator<'_> {
    fn sentence(&mut self, sources: &WeightedIndex<f64>, conflict: Option<Convention>) -> SegmentedSentence {
        let n = self.rng.gen_range(self.spec.min_words..=self.spec.max_words);
        let mut words: Vec<String> = (0..n)
            .map(|_| {
                let inv = match sources.sample(&mut self.rng) {
                    0 => &self.shared,
                    1 => &self.only_a,
                    _ => &self.only_b,
                };
                inv.sample(&mut self.rng).to_string()
            })
            .collect();
        if let Some(convention) = conflict {
            let at = self.rng.gen_range(0..n);
            let [c1, c2] = *self.conflicts.choose(&mut self.rng).expect("conflicts exist");
            match convention {
                Convention::Joined => words[at] = [c1, c2].iter().collect(),
                Convention::Split => {
                    words.splice(at..=at, [c1.to_string(), c2.to_string()]);
                }
            }
        }
        SegmentedSentence::from_words(&words).expect("words are non-empty")
    }

    /// `count` sentences of which exactly `round(rate·count)` carry a
    /// conflict bigram.
    fn corpus(&mut self, mix: [f64; 3], count: usize, rate: f64, convention: Convention) -> Vec<SegmentedSentence> {
        let sources = WeightedIndex::new(mix).expect("validated mix");
        let with_conflict = (rate * count as f64).round() as usize;
        let mut flags = vec![false; count];
        let order = shuffled_indices(count, self.rng.gen());
        for &i in order.iter().take(with_conflict) {
            flags[i] = true;
        }
        flags
            .into_iter()
            .map(|f| self.sentence(&sources, f.then_some(convention)))
            .collect()
    }
}

/// Generates the three-domain benchmark. Deterministic in `spec`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthCorpora> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut alphabet: Vec<char> = (0..spec.alphabet_size as u32)
        .map(|i| char::from_u32(ALPHABET_BASE + i).expect("private-use code point"))
        .collect();
    alphabet.shuffle(&mut rng);
    let (reserved, regular) = alphabet.split_at(2 * spec.conflict_bigrams);
    let conflicts: Vec<[char; 2]> = reserved.chunks_exact(2).map(|p| [p[0], p[1]]).collect();

    let total = spec.shared_words + 2 * spec.domain_words;
    let lengths = WeightedIndex::new(&spec.word_length_weights).expect("validated weights");
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(total);
    let max_singles = regular.len();
    let mut attempts = 0usize;
    while words.len() < total {
        attempts += 1;
        if attempts > 1000 * total {
            return Err(Error::Config("could not draw enough distinct words".into()));
        }
        let len = lengths.sample(&mut rng) + 1;
        if len == 1 && words.iter().filter(|w: &&String| w.chars().count() == 1).count() >= max_singles {
            continue;
        }
        let w: String = (0..len)
            .map(|_| *regular.choose(&mut rng).expect("regular chars"))
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    let only_b = words.split_off(spec.shared_words + spec.domain_words);
    let only_a = words.split_off(spec.shared_words);
    let shared = words;

    let mut gen = Generator {
        spec,
        rng,
        shared: Inventory::new(shared, spec.zipf_exponent),
        only_a: Inventory::new(only_a, spec.zipf_exponent),
        only_b: Inventory::new(only_b, spec.zipf_exponent),
        conflicts,
    };
    let s = spec.source_shared_share;
    let domain_a = gen.corpus(
        [s, 1.0 - s, 0.0],
        spec.source_sentences,
        spec.source_conflict_rate,
        Convention::Joined,
    );
    let domain_b = gen.corpus(
        [s, 0.0, 1.0 - s],
        spec.source_sentences,
        spec.source_conflict_rate,
        Convention::Split,
    );
    let target_train = gen.corpus(
        spec.target_mix,
        spec.target_train,
        spec.target_conflict_rate,
        Convention::Joined,
    );
    let target_test = gen.corpus(
        spec.target_mix,
        spec.target_test,
        spec.target_conflict_rate,
        Convention::Joined,
    );
    Ok(SynthCorpora {
        domain_a,
        domain_b,
        target_train,
        target_test,
        conflicts: gen.conflicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            source_sentences: 300,
            target_train: 50,
            target_test: 80,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.domain_a, c.domain_a);
    }

    #[test]
    fn split_sizes() {
        let c = gen_synthetic(&small()).unwrap();
        assert_eq!(c.domain_a.len(), 300);
        assert_eq!(c.domain_b.len(), 300);
        assert_eq!(c.target_train.len(), 50);
        assert_eq!(c.target_test.len(), 80);
        assert_eq!(c.conflicts.len(), 8);
    }

    #[test]
    fn conventions_differ_on_conflicts() {
        let c = gen_synthetic(&small()).unwrap();
        let reserved: HashSet<char> = c.conflicts.iter().flatten().copied().collect();
        let lens_on_reserved = |corpus: &[SegmentedSentence]| -> HashSet<usize> {
            corpus
                .iter()
                .flat_map(|s| s.words())
                .filter(|w| w.chars().any(|ch| reserved.contains(&ch)))
                .map(|w| w.chars().count())
                .collect()
        };
        assert_eq!(lens_on_reserved(&c.domain_a), HashSet::from([2]));
        assert_eq!(lens_on_reserved(&c.domain_b), HashSet::from([1]));
        assert_eq!(lens_on_reserved(&c.target_test), HashSet::from([2]));
    }

    #[test]
    fn rejects_inconsistent_specs() {
        for bad in [
            SynthSpec {
                alphabet_size: 16,
                ..small()
            },
            SynthSpec {
                min_words: 5,
                max_words: 4,
                ..small()
            },
            SynthSpec {
                target_conflict_rate: 1.5,
                ..small()
            },
            SynthSpec {
                word_length_weights: vec![],
                ..small()
            },
            SynthSpec {
                alphabet_size: 18,
                conflict_bigrams: 8,
                shared_words: 400,
                ..small()
            },
        ] {
            assert!(matches!(gen_synthetic(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
