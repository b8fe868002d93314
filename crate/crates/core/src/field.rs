//! Sampled fields on a regular pixel grid.
//!
//! Arrays are stored row-major as `(height, width)`; `pitch` is the physical
//! pixel size in meters and is shared by both axes.

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// Smallest accepted side length for a [`ComplexField`].
pub const MIN_FIELD_SIZE: usize = 8;

fn check_pitch(pitch: f64) -> Result<()> {
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(Error::invalid(format!("pitch must be positive, got {pitch}")));
    }
    Ok(())
}

/// Complex amplitude `A(x) e^{i phi(x)}` on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pitch: f64,
    data: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(data: Array2<Complex64>, pitch: f64) -> Result<Self> {
        check_pitch(pitch)?;
        let (h, w) = data.dim();
        if h < MIN_FIELD_SIZE || w < MIN_FIELD_SIZE {
            return Err(Error::invalid(format!(
                "field must be at least {MIN_FIELD_SIZE}x{MIN_FIELD_SIZE}, got {w}x{h}"
            )));
        }
        if let Some(index) = data.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::NonFinite { what: "complex field", index });
        }
        Ok(Self { pitch, data })
    }

    /// Thin transmittance `amplitude * exp(i * phase)`.
    pub fn from_amplitude_phase(amplitude: &RealImage, phase: &RealImage) -> Result<Self> {
        amplitude.check_same_grid(phase)?;
        let data = Zip::from(amplitude.data()).and(phase.data()).map_collect(|&a, &p| Complex64::from_polar(a, p));
        Self::new(data, phase.pitch())
    }

    /// Pure-phase object with unit amplitude.
    pub fn from_phase(phase: &RealImage) -> Result<Self> {
        let data = phase.data().mapv(|p| Complex64::from_polar(1.0, p));
        Self::new(data, phase.pitch())
    }

    pub fn uniform(width: usize, height: usize, pitch: f64, value: Complex64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), pitch)
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    /// Total power `sum |a|^2`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub(crate) fn from_parts_unchecked(data: Array2<Complex64>, pitch: f64) -> Self {
        Self { pitch, data }
    }
}

/// Real-valued image: intensity (non-negative, linear units) or phase (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pitch: f64,
    data: Array2<f64>,
}

/// Phase maps are real images whose values are radians.
pub type PhaseMap = RealImage;

impl RealImage {
    pub fn new(data: Array2<f64>, pitch: f64) -> Result<Self> {
        check_pitch(pitch)?;
        if data.is_empty() {
            return Err(Error::invalid("image must not be empty"));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "image", index });
        }
        Ok(Self { pitch, data })
    }

    /// Intensity-role constructor: additionally rejects negative values.
    pub fn intensity(data: Array2<f64>, pitch: f64) -> Result<Self> {
        if let Some(index) = data.iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!("negative intensity at index {index}")));
        }
        Self::new(data, pitch)
    }

    pub fn zeros(width: usize, height: usize, pitch: f64) -> Result<Self> {
        Self::new(Array2::zeros((height, width)), pitch)
    }

    pub fn constant(width: usize, height: usize, pitch: f64, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), pitch)
    }

    pub fn from_fn(width: usize, height: usize, pitch: f64, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn((height, width), |(r, c)| f(r, c)), pitch)
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Copy with the spatial mean subtracted.
    pub fn zero_mean(&self) -> RealImage {
        let m = self.mean();
        self.map(|v| v - m)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealImage {
        RealImage { pitch: self.pitch, data: self.data.mapv(f) }
    }

    pub fn scaled(&self, s: f64) -> RealImage {
        self.map(|v| v * s)
    }

    pub fn same_grid(&self, other: &RealImage) -> bool {
        self.data.dim() == other.data.dim() && self.pitch == other.pitch
    }

    pub fn check_same_grid(&self, other: &RealImage) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{}x{} @ {} m vs {}x{} @ {} m",
                self.width(),
                self.height(),
                self.pitch,
                other.width(),
                other.height(),
                other.pitch
            )))
        }
    }

    /// Pixelwise `self - other`.
    pub fn sub(&self, other: &RealImage) -> Result<RealImage> {
        self.check_same_grid(other)?;
        Ok(RealImage { pitch: self.pitch, data: &self.data - &other.data })
    }

    pub(crate) fn from_parts_unchecked(data: Array2<f64>, pitch: f64) -> Self {
        Self { pitch, data }
    }
}
