//! Two-tower decoder fusion ("zipping") with gated cross-attention.
//!
//! The crate contains a small reverse-mode autodiff core, unimodal decoder
//! towers, the zipped multi-tower model, a synthetic paired text/speech-token
//! corpus, fine-tuning and decoding, and the evaluation harness (WER,
//! Wilcoxon signed-rank, data-fraction sweeps and ablations).

pub mod error;
pub mod evalkit;
pub mod numeric;

pub use error::{Error, Result};
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod inference;
pub mod interleave;
pub mod fusion;
pub mod layers;
pub mod seeding;
pub mod synthdata;
pub mod training;
