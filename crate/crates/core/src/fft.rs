//! Two-dimensional FFT helpers on top of `rustfft`.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward/inverse 2D transforms for a fixed `(height, width)`.
///
/// The inverse is normalized by `1/(h*w)` so `inverse(forward(x)) == x`.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut Array2<Complex64>) {
        self.run(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.height * self.width) as f64;
        data.mapv_inplace(|c| c * scale);
    }

    fn run(&self, data: &mut Array2<Complex64>, rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.dim(), (self.height, self.width), "fft plan/array shape mismatch");
        {
            let slice = data.as_slice_mut().expect("fft input must be in standard layout");
            rows.process(slice);
        }
        let mut t = data.t().as_standard_layout().into_owned();
        cols.process(t.as_slice_mut().expect("standard layout"));
        data.assign(&t.t());
    }
}

/// Forward 2D FFT of a real array.
pub fn fft2_real(data: &Array2<f64>) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut out = data.mapv(|v| Complex64::new(v, 0.0));
    Fft2::new(h, w).forward(&mut out);
    out
}

/// Inverse 2D FFT, keeping the real part.
pub fn ifft2_real(mut spectrum: Array2<Complex64>) -> Array2<f64> {
    let (h, w) = spectrum.dim();
    Fft2::new(h, w).inverse(&mut spectrum);
    spectrum.mapv(|c| c.re)
}

/// Sample frequencies in cycles per unit of `spacing`, DC first, negative
/// frequencies in the upper half (numpy `fftfreq` layout).
pub fn fftfreq(n: usize, spacing: f64) -> Vec<f64> {
    let denom = n as f64 * spacing;
    (0..n)
        .map(|i| {
            let k = if i < n.div_ceil(2) { i as f64 } else { i as f64 - n as f64 };
            k / denom
        })
        .collect()
}
