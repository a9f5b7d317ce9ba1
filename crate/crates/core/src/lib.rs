//! Reconstructing bus trajectories from stop-level arrival-time feeds.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dedup;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod interpolate;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod stitch;

pub use error::{Error, Result};
pub use model::*;
