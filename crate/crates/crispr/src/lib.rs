//! Bias-neuron detection, calibration baselines, and structured pruning for a
//! small deterministic encoder-decoder transformer.
//!
//! The pipeline scores multiple-choice instances by teacher-forcing each
//! candidate label through the decoder, attributes the gap between biased and
//! correct predictions to individual hidden channels (gradient x activation at
//! every linear sublayer output), ranks channels by that bias attribution,
//! and prunes the top-ranked ones by zeroing their incoming weights. Masks
//! are persisted as JSON tied to a model fingerprint; contextual calibration
//! baselines and an evaluation harness make before/after comparisons, and a
//! set of brute-force oracles independently verifies the gradient code, the
//! pruning search, and the end-to-end recovery of a known planted bias.

pub mod attribution;
pub mod baselines;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod oracles;
pub mod pruner;
pub mod runtime;
pub mod tensor;
pub mod tokenizer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
