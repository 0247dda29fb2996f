//! Iterative refinement of guess translations by single-word substitutions.
//!
//! The crate covers the whole pipeline: synthetic parallel data with
//! corrupted guesses, a word-level error detector, single- and dual-attention
//! substitution models built on a small hand-differentiated layer library,
//! the substitution loop with its scoring heuristics, and BLEU-based
//! evaluation including oracle refinement and parameter sweeps.

pub mod checkpoint;
pub mod corpus;
pub mod dual_attention;
pub mod encoder;
pub mod error;
pub mod error_detection;
pub mod evaluation;
pub mod hellinger_pca;
pub mod neural_core;
pub mod refinement;
pub mod single_attention;
pub mod training;

pub use error::{Error, Result};
