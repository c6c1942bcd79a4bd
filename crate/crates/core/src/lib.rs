// Negated float comparisons below intentionally reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Decoding-time debiasing lab built around a tiny transparent language model.

pub mod attr;
pub mod controller;
pub mod error;
pub mod eval;
pub mod expcli;
pub mod infoth;
pub mod seqcore;
pub mod toylm;

pub use error::{LabError, Result};
