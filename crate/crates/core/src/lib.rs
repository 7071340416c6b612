//! Estimating the ECG T:R amplitude ratio from phase-space-reconstruction
//! images with small regression networks, and screening 24-hour recordings
//! for S-ICD eligibility from the predicted ratios.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod psr;
pub mod screen;
pub mod synth;
pub mod train;
pub mod wfdb;

pub use error::{Error, Result};
