//! Scalar-wave forward model.
//!
//! Free-space propagation uses the paraxial Fresnel transfer function
//! `H(u) = exp(ikz) * exp(-i pi lambda z |u|^2)` applied in the Fourier
//! domain with periodic boundaries. A polychromatic sensor channel integrates
//! coherent monochromatic images weighted by its Gaussian quantum efficiency.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fftfreq, Fft2};
use crate::field::{ComplexField, RealImage};

pub const NM: f64 = 1e-9;
pub const UM: f64 = 1e-6;

/// Gaussian spectral sensitivity of one sensor channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorChannel {
    /// Channel center, meters.
    pub lambda_c: f64,
    /// Sensitivity width, meters.
    pub sigma_c: f64,
}

impl SensorChannel {
    pub fn new(lambda_c: f64, sigma_c: f64) -> Result<Self> {
        if !(350.0 * NM..=800.0 * NM).contains(&lambda_c) {
            return Err(Error::invalid(format!("channel center {:.1} nm outside [350, 800] nm", lambda_c / NM)));
        }
        if !(sigma_c.is_finite() && sigma_c > 0.0) {
            return Err(Error::invalid(format!("channel width must be positive, got {sigma_c}")));
        }
        Ok(Self { lambda_c, sigma_c })
    }

    pub fn red(sigma_c: f64) -> Result<Self> {
        Self::new(630.0 * NM, sigma_c)
    }

    pub fn green(sigma_c: f64) -> Result<Self> {
        Self::new(550.0 * NM, sigma_c)
    }

    pub fn blue(sigma_c: f64) -> Result<Self> {
        Self::new(450.0 * NM, sigma_c)
    }
}

/// Ordered, uniformly spaced wavelength samples (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    lambdas: Vec<f64>,
    step: f64,
}

impl WavelengthGrid {
    /// Left endpoints of the `step`-wide intervals covering `[start, end)`.
    pub fn band(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(start > 0.0 && end > start && step > 0.0) {
            return Err(Error::invalid(format!("invalid band [{start}, {end}) with step {step}")));
        }
        let n = ((end - start) / step).round() as usize;
        if n < 2 {
            return Err(Error::invalid("band must contain at least two wavelengths"));
        }
        let lambdas = (0..n).map(|i| start + i as f64 * step).collect();
        Ok(Self { lambdas, step })
    }

    /// Degenerate single-wavelength grid (monochromatic illumination).
    pub fn single(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("wavelength must be positive, got {lambda}")));
        }
        Ok(Self { lambdas: vec![lambda], step: 0.0 })
    }

    /// Explicit wavelength list; must be strictly increasing and uniform.
    pub fn from_lambdas(lambdas: Vec<f64>) -> Result<Self> {
        match lambdas.len() {
            0 => return Err(Error::invalid("wavelength grid is empty")),
            1 => return Self::single(lambdas[0]),
            _ => {}
        }
        if lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::invalid("wavelengths must be positive"));
        }
        let step = lambdas[1] - lambdas[0];
        for pair in lambdas.windows(2) {
            let d = pair[1] - pair[0];
            if d <= 0.0 {
                return Err(Error::invalid("wavelengths must be strictly increasing"));
            }
            if (d - step).abs() > 1e-9 * step {
                return Err(Error::invalid("wavelength grid must be uniform"));
            }
        }
        Ok(Self { lambdas, step })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

impl Default for WavelengthGrid {
    /// 400-700 nm in 6 nm intervals (50 left endpoints).
    fn default() -> Self {
        Self::band(400.0 * NM, 700.0 * NM, 6.0 * NM).expect("static band is valid")
    }
}

/// `Q_c(lambda) = exp(-(lambda - lambda_c)^2 / (2 sigma_c^2))`.
pub fn quantum_efficiency(lambda: f64, channel: &SensorChannel) -> f64 {
    let d = lambda - channel.lambda_c;
    (-d * d / (2.0 * channel.sigma_c * channel.sigma_c)).exp()
}

/// Efficiency-weighted mean wavelength of a channel over `grid`.
pub fn effective_wavelength(channel: &SensorChannel, grid: &WavelengthGrid) -> f64 {
    let (num, den) = grid.lambdas().iter().fold((0.0, 0.0), |(n, d), &l| {
        let q = quantum_efficiency(l, channel);
        (n + q * l, d + q)
    });
    num / den
}

/// Uniform-object response of a channel: `(1/W) sum_i Q_c(lambda_i)`.
pub fn channel_gain(channel: &SensorChannel, grid: &WavelengthGrid) -> f64 {
    grid.lambdas().iter().map(|&l| quantum_efficiency(l, channel)).sum::<f64>() / grid.len() as f64
}

/// Fresnel number-like sampling ratio `lambda |z| / (pitch^2 N)`; values above
/// one mean the transfer-function chirp is undersampled.
pub fn fresnel_sampling_ratio(width: usize, height: usize, pitch: f64, z: f64, lambda: f64) -> f64 {
    lambda * z.abs() / (pitch * pitch * width.max(height) as f64)
}

fn padded_len(n: usize) -> usize {
    if n.is_power_of_two() {
        n
    } else {
        n.next_power_of_two()
    }
}

/// Object spectrum on the (possibly zero-padded) propagation grid.
struct Spectrum {
    data: Array2<Complex64>,
    plan: Fft2,
    crop: (usize, usize),
    fx: Vec<f64>,
    fy: Vec<f64>,
}

impl Spectrum {
    fn new(field: &ComplexField) -> Self {
        let (h, w) = (field.height(), field.width());
        let (ph, pw) = (padded_len(h), padded_len(w));
        let mut data = Array2::zeros((ph, pw));
        data.slice_mut(s![..h, ..w]).assign(field.data());
        let plan = Fft2::new(ph, pw);
        plan.forward(&mut data);
        Self { data, plan, crop: (h, w), fx: fftfreq(pw, field.pitch()), fy: fftfreq(ph, field.pitch()) }
    }

    fn propagate(&self, z: f64, lambda: f64) -> Array2<Complex64> {
        let k = 2.0 * PI / lambda;
        let global = Complex64::from_polar(1.0, k * z);
        let chirp = -PI * lambda * z;
        let mut out = self.data.clone();
        for ((r, c), v) in out.indexed_iter_mut() {
            let u2 = self.fx[c] * self.fx[c] + self.fy[r] * self.fy[r];
            *v *= global * Complex64::from_polar(1.0, chirp * u2);
        }
        self.plan.inverse(&mut out);
        let (h, w) = self.crop;
        if out.dim() == (h, w) {
            out
        } else {
            out.slice(s![..h, ..w]).to_owned()
        }
    }
}

fn check_propagation_args(field: &ComplexField, z: f64, lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("wavelength must be positive, got {lambda}")));
    }
    if !z.is_finite() {
        return Err(Error::invalid(format!("propagation distance must be finite, got {z}")));
    }
    let ratio = fresnel_sampling_ratio(field.width(), field.height(), field.pitch(), z, lambda);
    if ratio > 1.0 {
        log::warn!(
            "Fresnel transfer function undersampled: lambda|z|/(pitch^2 N) = {ratio:.3} > 1 \
             (z = {z:e} m, lambda = {lambda:e} m)"
        );
    }
    Ok(())
}

/// Propagate `field` by `z` meters at wavelength `lambda` (negative `z`
/// back-propagates). The output lives on the input grid.
pub fn fresnel_propagate(field: &ComplexField, z: f64, lambda: f64) -> Result<ComplexField> {
    check_propagation_args(field, z, lambda)?;
    if z == 0.0 {
        return Ok(field.clone());
    }
    let out = Spectrum::new(field).propagate(z, lambda);
    Ok(ComplexField::from_parts_unchecked(out, field.pitch()))
}

/// Pixelwise `|a|^2`.
pub fn intensity(field: &ComplexField) -> RealImage {
    RealImage::from_parts_unchecked(field.data().mapv(|c| c.norm_sqr()), field.pitch())
}

fn monochromatic_stack(object: &ComplexField, z: f64, grid: &WavelengthGrid) -> Result<Vec<Array2<f64>>> {
    if grid.is_empty() {
        return Err(Error::invalid("wavelength grid is empty"));
    }
    for &l in grid.lambdas() {
        check_propagation_args(object, z, l)?;
    }
    if z == 0.0 {
        let i = intensity(object).into_data();
        return Ok(vec![i; grid.len()]);
    }
    let spectrum = Spectrum::new(object);
    Ok(grid.lambdas().par_iter().map(|&l| spectrum.propagate(z, l).mapv(|c| c.norm_sqr())).collect())
}

fn weighted_sum(stack: &[Array2<f64>], weights: &[f64], pitch: f64) -> RealImage {
    let mut acc = Array2::zeros(stack[0].dim());
    for (img, &q) in stack.iter().zip(weights) {
        acc.scaled_add(q, img);
    }
    let w = stack.len() as f64;
    acc.mapv_inplace(|v: f64| v / w);
    RealImage::from_parts_unchecked(acc, pitch)
}

/// Sensor-channel image `I_c = (1/W) sum_i Q_c(lambda_i) I(x; z, lambda_i)`
/// under coherent plane-wave illumination at each wavelength.
pub fn polychromatic_image(
    object: &ComplexField,
    z: f64,
    channel: &SensorChannel,
    grid: &WavelengthGrid,
) -> Result<RealImage> {
    let stack = monochromatic_stack(object, z, grid)?;
    let weights: Vec<f64> = grid.lambdas().iter().map(|&l| quantum_efficiency(l, channel)).collect();
    Ok(weighted_sum(&stack, &weights, object.pitch()))
}

/// Several channels from one set of monochromatic propagations.
pub fn polychromatic_channels<const N: usize>(
    object: &ComplexField,
    z: f64,
    channels: &[SensorChannel; N],
    grid: &WavelengthGrid,
) -> Result<[RealImage; N]> {
    let stack = monochromatic_stack(object, z, grid)?;
    Ok(channels.map(|ch| {
        let weights: Vec<f64> = grid.lambdas().iter().map(|&l| quantum_efficiency(l, &ch)).collect();
        weighted_sum(&stack, &weights, object.pitch())
    }))
}

/// Multiply the field by a raised-cosine edge taper of `width` pixels.
pub fn apodize(field: &ComplexField, width: usize) -> ComplexField {
    let taper = |i: usize, n: usize| -> f64 {
        let d = i.min(n - 1 - i);
        if width == 0 || d >= width {
            1.0
        } else {
            0.5 * (1.0 - (PI * (d as f64 + 0.5) / width as f64).cos())
        }
    };
    let (h, w) = (field.height(), field.width());
    let mut data = field.data().clone();
    for ((r, c), v) in data.indexed_iter_mut() {
        *v *= taper(r, h) * taper(c, w);
    }
    ComplexField::from_parts_unchecked(data, field.pitch())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_phase_field(n: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data =
            Array2::from_shape_fn((n, n), |_| Complex64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(-PI..PI)));
        ComplexField::new(data, 0.5 * UM).unwrap()
    }

    #[test]
    fn zero_distance_is_identity() {
        let f = random_phase_field(16, 1);
        assert_eq!(fresnel_propagate(&f, 0.0, 550.0 * NM).unwrap(), f);
    }

    #[test]
    fn plane_wave_stays_uniform() {
        let f = ComplexField::uniform(32, 32, 0.5 * UM, Complex64::new(1.0, 0.0)).unwrap();
        let i = intensity(&fresnel_propagate(&f, 2.0 * UM, 550.0 * NM).unwrap());
        for v in i.data() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_is_conserved() {
        let f = random_phase_field(64, 7);
        let g = fresnel_propagate(&f, 1.0 * UM, 630.0 * NM).unwrap();
        assert_relative_eq!(g.energy(), f.energy(), max_relative = 1e-10);
    }

    #[test]
    fn non_power_of_two_keeps_shape() {
        let data = Array2::from_elem((12, 20), Complex64::new(1.0, 0.0));
        let f = ComplexField::new(data, UM).unwrap();
        let g = fresnel_propagate(&f, 1.0 * UM, 500.0 * NM).unwrap();
        assert_eq!((g.height(), g.width()), (12, 20));
    }

    #[test]
    fn rejects_bad_arguments() {
        let f = random_phase_field(8, 3);
        assert!(fresnel_propagate(&f, 1e-6, 0.0).is_err());
        assert!(fresnel_propagate(&f, f64::NAN, 5e-7).is_err());
        let bad = Array2::from_elem((8, 8), Complex64::new(f64::NAN, 0.0));
        assert!(matches!(ComplexField::new(bad, UM), Err(Error::NonFinite { .. })));
        assert!(ComplexField::uniform(4, 8, UM, Complex64::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn intensity_examples() {
        let one = ComplexField::uniform(8, 8, UM, Complex64::from_polar(1.0, 0.3)).unwrap();
        assert!(intensity(&one).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let zero = ComplexField::uniform(8, 8, UM, Complex64::new(0.0, 0.0)).unwrap();
        assert!(intensity(&zero).data().iter().all(|&v| v == 0.0));
        let diag = Complex64::new(1.0, 1.0) / 2f64.sqrt();
        let d = ComplexField::uniform(8, 8, UM, diag).unwrap();
        assert!(intensity(&d).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn quantum_efficiency_examples() {
        let ch = SensorChannel::green(50.0 * NM).unwrap();
        assert_eq!(quantum_efficiency(550.0 * NM, &ch), 1.0);
        assert_relative_eq!(quantum_efficiency(600.0 * NM, &ch), (-0.5f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(quantum_efficiency(450.0 * NM, &ch), (-2.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn channel_validation() {
        assert!(SensorChannel::new(300.0 * NM, 10.0 * NM).is_err());
        assert!(SensorChannel::new(550.0 * NM, 0.0).is_err());
    }

    #[test]
    fn default_band() {
        let g = WavelengthGrid::default();
        assert_eq!(g.len(), 50);
        assert_relative_eq!(g.lambdas()[0], 400.0 * NM);
        assert_relative_eq!(g.lambdas()[49], 694.0 * NM, max_relative = 1e-12);
        assert!(WavelengthGrid::from_lambdas(vec![5e-7, 4e-7]).is_err());
        assert!(WavelengthGrid::from_lambdas(vec![4e-7, 5e-7, 5.5e-7]).is_err());
        assert!(WavelengthGrid::from_lambdas(vec![]).is_err());
    }

    #[test]
    fn uniform_object_gives_channel_gain() {
        let f = ComplexField::uniform(16, 16, 0.5 * UM, Complex64::new(1.0, 0.0)).unwrap();
        let grid = WavelengthGrid::default();
        let ch = SensorChannel::red(40.0 * NM).unwrap();
        let img = polychromatic_image(&f, 2.0 * UM, &ch, &grid).unwrap();
        let gain = channel_gain(&ch, &grid);
        for v in img.data() {
            assert_relative_eq!(*v, gain, max_relative = 1e-12);
        }
    }

    #[test]
    fn single_wavelength_equals_monochromatic() {
        let f = random_phase_field(16, 11);
        let ch = SensorChannel::green(30.0 * NM).unwrap();
        let grid = WavelengthGrid::single(ch.lambda_c).unwrap();
        let poly = polychromatic_image(&f, 1.5 * UM, &ch, &grid).unwrap();
        let mono = intensity(&fresnel_propagate(&f, 1.5 * UM, ch.lambda_c).unwrap());
        for (a, b) in poly.data().iter().zip(mono.data()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn apodize_tapers_edges_only() {
        let f = ComplexField::uniform(32, 32, UM, Complex64::new(1.0, 0.0)).unwrap();
        let a = apodize(&f, 8);
        assert!(a.data()[[0, 0]].norm() < 0.01);
        assert_eq!(a.data()[[16, 16]], Complex64::new(1.0, 0.0));
    }
}
