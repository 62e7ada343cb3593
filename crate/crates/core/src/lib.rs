//! Emphasis selection: given a short sentence, score every word's probability
//! of deserving visual emphasis.
//!
//! The model combines three views of a sentence: a two-layer bidirectional GRU
//! over word and POS-tag embeddings, a gated-residual graph convolution over a
//! complete word-similarity graph, and masked self-attention over the
//! sentence-structure graph derived from a constituency parse. Everything runs
//! on an in-crate reverse-mode autodiff engine; training uses Adam and
//! evaluation uses the Match-m top-set overlap metric.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod parse_tree;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod wsg;

pub use error::{Error, Result};
