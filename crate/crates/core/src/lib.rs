//! Deterministic single-process simulator of federated averaging under
//! poisoning attacks.
//!
//! The crate trains a dense ReLU network across simulated participants,
//! injects label-flipping, Byzantine, or partial-knowledge attacks into a
//! malicious subset, and aggregates each round with one of four server
//! strategies: plain weighted averaging, coordinate-wise median, trimmed
//! mean, or layer-wise IQR outlier elimination.
//!
//! Every random draw flows from a master seed through
//! [`seeding::seed_schedule`], so a run is bit-identical across repeats
//! and across worker counts.

pub mod aggregation;
pub mod attacks;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod seeding;

pub use error::{Error, Result};
