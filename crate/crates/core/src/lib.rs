//! Algorithmic core of a universal lesion detection pipeline.
//!
//! The crate covers everything around the detector network: anchor-free
//! target math and losses ([`afp`]), fusion of dataset-expert proposals into
//! 3D boxes ([`ensemble`]), missing-annotation mining ([`mining`]),
//! false-positive-reduction sample selection ([`fpr`]), FROC evaluation
//! ([`eval`]), file formats ([`ingest`]), a synthetic cohort and oracle
//! detector standing in for trained networks ([`synth`]), and the end-to-end
//! orchestration used by the `lens` CLI ([`pipeline`]).

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod afp;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fpr;
pub mod geometry;
pub mod ingest;
pub mod mining;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
