//! Speaker-adversarial training laboratory.
//!
//! A small reverse-mode autodiff engine with gradient reversal, a synthetic
//! multi-speaker corpus, a conformer-lite CTC recognizer with a flexible
//! speaker-adversarial branch, and the evaluation chain used to measure how
//! much speaker information survives in the learned representations.

// `!(x > 0.0)` is the NaN-rejecting form every validator uses.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{GradientMap, Gradients, ParamId, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
