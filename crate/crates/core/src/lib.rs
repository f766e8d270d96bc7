//! Distills a conditional diffusion teacher into a one-step generator with
//! guidance injected into both score networks, on Gaussian-mixture worlds
//! whose scores and denoisers are exact.

pub mod checks;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod oracle;

pub use error::{Error, Result};
