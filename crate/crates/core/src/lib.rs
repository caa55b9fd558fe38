//! Severity-aware unmixing of superimposed two-channel fluorescence images.
//!
//! A superimposed frame is modelled as `(1 - t) * c0 + t * c1` for an unknown
//! mixing ratio `t`. The crate builds the per-ratio input normalization table,
//! trains two ratio-conditioned generators and a ratio regressor, and runs
//! acquisition-level inference and evaluation on top of them.
//!
//! Batch work (table construction, per-sample gradients, per-tile inference,
//! per-frame metrics) goes through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every parallel
//! work item owns its own RNG stream so results do not depend on scheduling.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod image;
pub mod infer;
pub mod mixing;
pub mod nets;
pub mod par;
pub mod rng;
pub mod scin;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
