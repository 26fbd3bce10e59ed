//! Online noisy-label filtering for deep metric learning: clean-probability
//! estimators over a class-aware memory bank, batch thresholds, metric losses,
//! a small trainable encoder, synthetic data and evaluation.

pub mod encoder;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod filters;
pub mod harness;
pub mod losses;
pub mod membank;
pub mod numerics;
pub mod rng;
pub mod thresholds;
pub mod vmf;

/// Integer class identifier.
pub type ClassId = usize;

pub use error::{PrismError, Result};
