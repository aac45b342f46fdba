//! Chinese word segmentation with per-domain Bi-LSTM taggers combined by
//! deep stacking networks.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod persist;
pub mod segmenter;
pub mod stacking;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
