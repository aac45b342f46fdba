//! Corpus I/O, word-level scoring and the synthetic benchmark generator.

pub mod corpus;
pub mod metrics;
pub mod synth;

pub use corpus::{
    format_corpus, fraction_count, parse_corpus, read_corpus, shuffled_indices, subsample, write_corpus,
    SegmentedSentence,
};
pub use metrics::{f1_score, Prf, SpanCounts};
pub use synth::{gen_synthetic, SynthCorpora, SynthSpec};
