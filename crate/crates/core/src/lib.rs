//! Two-layer network training, greedy forward selection pruning, and numeric
//! checks of the subnetwork loss bounds and pre-training thresholds.

pub mod bounds;
pub mod data;
pub mod error;
pub mod harness;
pub mod lp;
pub mod model;
pub mod polytope;
pub mod pruning;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
