//! Point-cloud completion with a retrieval-augmented prototype memory.
//!
//! A partial cloud is encoded into a global descriptor, the descriptor is
//! pulled toward its nearest learned prototype by confidence-gated fusion,
//! and a folding decoder turns the fused descriptor into a completed cloud.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod memory;
pub mod model;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
