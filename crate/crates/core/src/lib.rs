//! Single-exposure quantitative phase imaging from chromatic aberration.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod field;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optics;
pub mod poly;
pub mod theory;
pub mod tie;

pub use error::{Error, Result};
pub use field::{ComplexField, PhaseMap, RealImage};
