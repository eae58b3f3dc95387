//! Synthetic control estimators (standard, augmented, interactive fixed
//! effects), an empirically calibrated panel simulator, and the experiment
//! harness that scores the estimators against known ground truth.

pub mod augment;
pub mod cli;
pub mod dgp;
pub mod error;
pub mod evalx;
pub mod ife;
pub mod optim;
pub mod panel;
pub mod synth;

pub use error::{Error, Result};
