//! BMES character tags and the word-span codec built on them.

use std::fmt;

use crate::error::{Error, Result};

/// Position of a character within its word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    /// first character of a multi-character word
    B = 0,
    /// interior character
    M = 1,
    /// last character of a multi-character word
    E = 2,
    /// single-character word
    S = 3,
}

pub const NUM_TAGS: usize = 4;

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [Tag::B, Tag::M, Tag::E, Tag::S];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Tag> {
        Tag::ALL.get(code).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Tag::B => 'B',
            Tag::M => 'M',
            Tag::E => 'E',
            Tag::S => 'S',
        };
        write!(f, "{c}")
    }
}

pub fn bmes_encode(word_lengths: &[usize]) -> Result<Vec<Tag>> {
    let mut tags = Vec::with_capacity(word_lengths.iter().sum());
    for &len in word_lengths {
        match len {
            0 => return Err(Error::Contract("word length must be positive".into())),
            1 => tags.push(Tag::S),
            _ => {
                tags.push(Tag::B);
                tags.extend(std::iter::repeat_n(Tag::M, len - 2));
                tags.push(Tag::E);
            }
        }
    }
    Ok(tags)
}

/// Splits positions into words. A word starts at position 0 and at every
/// `B` or `S`; any tag sequence decodes, invalid transitions included.
pub fn bmes_decode(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tag) in tags.iter().enumerate().skip(1) {
        if matches!(tag, Tag::B | Tag::S) {
            spans.push((start, i));
            start = i;
        }
    }
    if !tags.is_empty() {
        spans.push((start, tags.len()));
    }
    spans
}
