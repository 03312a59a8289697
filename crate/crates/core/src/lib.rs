//! Multi-task CTC speech recognition: a shared convolutional trunk with a
//! character head and a word head trained on `L_word + λ·L_char`, plus the
//! data, decoding, scoring and recognized-word analysis around it.

pub mod analysis;
pub mod cli;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod error;
pub mod features;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod vocab;

pub use error::{Error, Result};
