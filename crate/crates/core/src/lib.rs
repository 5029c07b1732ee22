//! Normalized knowledge distillation (NKD) and universal self-knowledge
//! distillation (USKD): losses with analytic gradients, label synthesis,
//! tiny reverse-mode networks and a reproducible training harness.
//!
//! Start with [`kd`] for teacher-student losses, [`uskd`] for teacher-free
//! labels, and [`harness::run`] for end-to-end experiments.

// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod kd;
pub mod nets;
pub mod numkit;
pub mod seed;
pub mod uskd;

pub use error::{Error, Result};
