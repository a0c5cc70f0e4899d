//! An attentional encoder-decoder translation toolkit with a pluggable
//! loss layer: standard softmax cross-entropy or a word-embedding loss
//! that scores the output distribution by embedding-space distance to the
//! reference word. Includes its own reverse-mode autodiff engine, training
//! strategies that switch losses mid-run, greedy/beam decoding, and
//! BLEU / UNK-rate / near-miss evaluation.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod model;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
