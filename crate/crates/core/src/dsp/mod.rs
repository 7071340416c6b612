//! Signal-processing kernels used by the preprocessing chain.

pub mod iir;
pub mod wavelet;

pub use iir::{Biquad, SosFilter};
pub use wavelet::Wavelet;
