//! Contrastive predictive coding with exact-MI synthetic benchmarks.

pub mod autodiff;
pub mod contrastive;
pub mod error;
pub mod harness;
pub mod model;
pub mod probe;
pub mod rng;
pub mod synthdata;

pub use error::{CpcError, Result};
