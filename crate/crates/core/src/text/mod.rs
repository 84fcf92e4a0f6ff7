//! The frozen reference language model and its vocabulary.

mod encoder;
pub mod vocab;

pub use encoder::{vocab_logits, LmConfig, TextEncoder, TextFeatures, VOCAB_TABLE};
pub use vocab::Vocabulary;
