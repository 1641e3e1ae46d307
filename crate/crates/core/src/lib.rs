//! Visual question answering over surgical scenes.
//!
//! The crate provides a from-scratch tensor/autodiff substrate, a WordPiece
//! tokenizer, a small convolutional feature extractor with adaptive average
//! pooling into visual tokens, a joint vision-text encoder in two forms
//! (attention + feed-forward, or attention + cross-token/cross-channel MLP),
//! a transformer answer decoder with beam search, synthetic annotated scenes
//! with templated question-answer pairs, evaluation metrics, and the training
//! harness used by the command-line tool.

pub mod error;
pub mod numeric;
pub mod tokenizer;
pub mod vision;
pub mod encoder;
pub mod decoder;
pub mod data;
pub mod metrics;
pub mod harness;

pub use error::{Error, Result};
