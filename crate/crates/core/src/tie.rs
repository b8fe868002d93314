//! Transport-of-intensity phase reconstruction.
//!
//! All solvers work spectrally with periodic boundaries. The inverse
//! Laplacian uses the Tikhonov-regularized symbol `-4 pi^2 |k|^2 - eps` and
//! always nulls the DC bin, so every reconstructed phase has zero mean.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fftfreq, Fft2};
use crate::field::{PhaseMap, RealImage};
use crate::poly::legendre;

/// Spatial frequencies (cycles/meter) of an FFT grid, DC at `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
}

impl SpectralGrid {
    pub fn new(width: usize, height: usize, pitch: f64) -> Self {
        Self { kx: fftfreq(width, pitch), ky: fftfreq(height, pitch) }
    }

    pub fn for_image(image: &RealImage) -> Self {
        Self::new(image.width(), image.height(), image.pitch())
    }

    /// `4 pi^2 (kx^2 + ky^2)` at bin `(row, col)`.
    pub fn laplacian_symbol(&self, row: usize, col: usize) -> f64 {
        4.0 * PI * PI * (self.kx[col] * self.kx[col] + self.ky[row] * self.ky[row])
    }

    /// Mean of `4 pi^2 |k|^2` over all bins.
    pub fn mean_laplacian_symbol(&self) -> f64 {
        let sx: f64 = self.kx.iter().map(|k| k * k).sum::<f64>() / self.kx.len() as f64;
        let sy: f64 = self.ky.iter().map(|k| k * k).sum::<f64>() / self.ky.len() as f64;
        4.0 * PI * PI * (sx + sy)
    }
}

/// Default Tikhonov parameter: `1e-3 * mean(4 pi^2 |k|^2)`.
pub fn default_tikhonov(image: &RealImage) -> f64 {
    1e-3 * SpectralGrid::for_image(image).mean_laplacian_symbol()
}

/// Default Teague intensity floor: `1e-3 * max(I)`.
pub fn default_intensity_floor(intensity: &RealImage) -> f64 {
    1e-3 * intensity.max()
}

/// Which axial variable a derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxialVariable {
    /// Defocus distance `z` (meters); values are intensity per meter.
    Z,
    /// `xi = lambda z` (square meters); values are intensity per square meter.
    Xi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxialDerivative {
    pub variable: AxialVariable,
    pub image: RealImage,
}

impl AxialDerivative {
    pub fn z(image: RealImage) -> Self {
        Self { variable: AxialVariable::Z, image }
    }

    pub fn xi(image: RealImage) -> Self {
        Self { variable: AxialVariable::Xi, image }
    }

    fn expect(&self, variable: AxialVariable) -> Result<()> {
        if self.variable == variable {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "derivative is with respect to {:?}, solver needs {:?}",
                self.variable, variable
            )))
        }
    }
}

struct Spectral {
    grid: SpectralGrid,
    plan: Fft2,
    pitch: f64,
}

impl Spectral {
    fn new(image: &RealImage) -> Self {
        Self {
            grid: SpectralGrid::for_image(image),
            plan: Fft2::new(image.height(), image.width()),
            pitch: image.pitch(),
        }
    }

    fn forward_real(&self, a: &Array2<f64>) -> Array2<Complex64> {
        let mut s = a.mapv(|v| Complex64::new(v, 0.0));
        self.plan.forward(&mut s);
        s
    }

    fn forward(&self, mut a: Array2<Complex64>) -> Array2<Complex64> {
        self.plan.forward(&mut a);
        a
    }

    fn inverse(&self, mut s: Array2<Complex64>) -> Array2<Complex64> {
        self.plan.inverse(&mut s);
        s
    }

    /// Divide by `-4 pi^2 |k|^2 - eps`, DC bin set to zero.
    fn inverse_laplacian_in_place(&self, s: &mut Array2<Complex64>, eps: f64) {
        for ((r, c), v) in s.indexed_iter_mut() {
            if r == 0 && c == 0 {
                *v = Complex64::new(0.0, 0.0);
            } else {
                *v /= -self.grid.laplacian_symbol(r, c) - eps;
            }
        }
    }

    /// Spectral gradient `(i 2 pi kx s, i 2 pi ky s)`.
    fn gradient(&self, s: &Array2<Complex64>) -> (Array2<Complex64>, Array2<Complex64>) {
        let i2pi = Complex64::new(0.0, 2.0 * PI);
        let gx = Array2::from_shape_fn(s.dim(), |(r, c)| s[[r, c]] * i2pi * self.grid.kx[c]);
        let gy = Array2::from_shape_fn(s.dim(), |(r, c)| s[[r, c]] * i2pi * self.grid.ky[r]);
        (gx, gy)
    }

    fn divergence(&self, fx: &Array2<Complex64>, fy: &Array2<Complex64>) -> Array2<Complex64> {
        let i2pi = Complex64::new(0.0, 2.0 * PI);
        Array2::from_shape_fn(fx.dim(), |(r, c)| i2pi * (fx[[r, c]] * self.grid.kx[c] + fy[[r, c]] * self.grid.ky[r]))
    }

    fn to_zero_mean_image(&self, s: Array2<Complex64>) -> RealImage {
        let mut re = self.inverse(s).mapv(|c| c.re);
        let m = re.sum() / re.len() as f64;
        re.mapv_inplace(|v| v - m);
        RealImage::from_parts_unchecked(re, self.pitch)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::invalid(format!("regularization must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Regularized inverse Laplacian `F^-1{ F{g} / (-4 pi^2 |k|^2 - eps) }`
/// with the DC bin nulled.
pub fn inverse_laplacian(g: &RealImage, eps: f64) -> Result<RealImage> {
    check_eps(eps)?;
    let sp = Spectral::new(g);
    let mut s = sp.forward_real(g.data());
    sp.inverse_laplacian_in_place(&mut s, eps);
    Ok(sp.to_zero_mean_image(s))
}

/// Spectral Laplacian, used to check `inverse_laplacian`.
pub fn laplacian(g: &RealImage) -> RealImage {
    let sp = Spectral::new(g);
    let mut s = sp.forward_real(g.data());
    for ((r, c), v) in s.indexed_iter_mut() {
        *v *= -sp.grid.laplacian_symbol(r, c);
    }
    RealImage::from_parts_unchecked(sp.inverse(s).mapv(|c| c.re), g.pitch())
}

/// Uniform-illumination solver: `phi = lap^-1{ (-k / I0) dI/dz }`.
pub fn solve_pure_phase(didz: &AxialDerivative, i0: f64, k: f64, eps: f64) -> Result<PhaseMap> {
    didz.expect(AxialVariable::Z)?;
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(Error::invalid(format!("I0 must be positive, got {i0}")));
    }
    let scaled = didz.image.scaled(-k / i0);
    inverse_laplacian(&scaled, eps)
}

fn teague(deriv: &RealImage, intensity: &RealImage, k: f64, eps: f64, floor: f64) -> Result<PhaseMap> {
    check_eps(eps)?;
    deriv.check_same_grid(intensity)?;
    if !(floor.is_finite() && floor > 0.0) {
        return Err(Error::invalid(format!("intensity floor must be positive, got {floor}")));
    }
    if intensity.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("intensity must be non-negative"));
    }
    if intensity.max() < floor {
        return Err(Error::DegenerateInput(format!(
            "all-dark image: max intensity {:e} below floor {floor:e}",
            intensity.max()
        )));
    }
    let sp = Spectral::new(deriv);
    // psi = lap^-1[dI/dz] (regularized), so -k grad psi stands in for I grad phi.
    let mut psi = sp.forward_real(deriv.data());
    sp.inverse_laplacian_in_place(&mut psi, eps);
    let (gx, gy) = sp.gradient(&psi);
    // Intermediate fields stay complex so the pipeline collapses exactly to the
    // pure-phase solver when I is constant (Nyquist bins included).
    let weight = intensity.data().mapv(|v| 1.0 / v.max(floor));
    let mut fx = sp.inverse(gx);
    let mut fy = sp.inverse(gy);
    Zip::from(&mut fx).and(&weight).for_each(|v, &w| *v *= w);
    Zip::from(&mut fy).and(&weight).for_each(|v, &w| *v *= w);
    let mut div = sp.divergence(&sp.forward(fx), &sp.forward(fy));
    sp.inverse_laplacian_in_place(&mut div, 0.0);
    div.mapv_inplace(|v| v * -k);
    Ok(sp.to_zero_mean_image(div))
}

/// Teague's solution `phi = -k lap^-1{ div( (1/I) grad lap^-1[dI/dz] ) }`.
///
/// The inner Poisson solve carries the Tikhonov term; the outer one is
/// unregularized (DC nulled) so constant `I` reduces to [`solve_pure_phase`].
pub fn solve_teague(
    didz: &AxialDerivative,
    intensity: &RealImage,
    k: f64,
    eps: f64,
    intensity_floor: f64,
) -> Result<PhaseMap> {
    didz.expect(AxialVariable::Z)?;
    teague(&didz.image, intensity, k, eps, intensity_floor)
}

/// Chromatic form `-2 pi dI/dxi = div(I grad phi)`, solved like Teague with
/// `k` replaced by `2 pi`.
pub fn solve_tie_xi(
    didxi: &AxialDerivative,
    intensity: &RealImage,
    eps: f64,
    intensity_floor: f64,
) -> Result<PhaseMap> {
    didxi.expect(AxialVariable::Xi)?;
    teague(&didxi.image, intensity, 2.0 * PI, eps, intensity_floor)
}

/// How far Teague's conservative-field assumption is from holding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeagueDiagnostic {
    /// `||I grad phi - (-k grad lap^-1 dI/dz)|| / ||-k grad lap^-1 dI/dz||`.
    pub flux_residual: f64,
    /// `||curl((1/I) grad psi)|| / ||grad((1/I) grad psi)||`-style ratio; zero
    /// when `(1/I) grad psi` is itself a gradient field.
    pub curl_ratio: f64,
}

/// Conservativity diagnostic for a Teague reconstruction `phi`.
pub fn teague_diagnostic(
    didz: &AxialDerivative,
    intensity: &RealImage,
    phi: &PhaseMap,
    k: f64,
    eps: f64,
    intensity_floor: f64,
) -> Result<TeagueDiagnostic> {
    didz.image.check_same_grid(intensity)?;
    intensity.check_same_grid(phi)?;
    let sp = Spectral::new(intensity);
    let mut psi = sp.forward_real(didz.image.data());
    sp.inverse_laplacian_in_place(&mut psi, eps);
    let (tx, ty) = sp.gradient(&psi);
    let tx = sp.inverse(tx).mapv(|c| -k * c.re);
    let ty = sp.inverse(ty).mapv(|c| -k * c.re);

    let (px, py) = sp.gradient(&sp.forward_real(phi.data()));
    let px = sp.inverse(px).mapv(|c| c.re);
    let py = sp.inverse(py).mapv(|c| c.re);
    let i = intensity.data();

    let mut num = 0.0;
    let mut den = 0.0;
    for idx in 0..i.len() {
        let (r, c) = (idx / i.ncols(), idx % i.ncols());
        let fx = i[[r, c]] * px[[r, c]];
        let fy = i[[r, c]] * py[[r, c]];
        num += (fx - tx[[r, c]]).powi(2) + (fy - ty[[r, c]]).powi(2);
        den += tx[[r, c]].powi(2) + ty[[r, c]].powi(2);
    }
    let flux_residual = if den > 0.0 { (num / den).sqrt() } else { 0.0 };

    // curl of v = (1/I) * target flux
    let vx = Zip::from(&tx).and(i).map_collect(|&t, &iv| t / iv.max(intensity_floor));
    let vy = Zip::from(&ty).and(i).map_collect(|&t, &iv| t / iv.max(intensity_floor));
    let (_, dvx_dy) = sp.gradient(&sp.forward_real(&vx));
    let (dvy_dx, _) = sp.gradient(&sp.forward_real(&vy));
    let curl = sp.inverse(dvy_dx - dvx_dy).mapv(|c| c.re);
    let div = sp.inverse(sp.divergence(&sp.forward_real(&vx), &sp.forward_real(&vy))).mapv(|c| c.re);
    let cn = curl.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dn = div.iter().map(|v| v * v).sum::<f64>().sqrt();
    let curl_ratio = if cn + dn > 0.0 { cn / (cn + dn) } else { 0.0 };
    Ok(TeagueDiagnostic { flux_residual, curl_ratio })
}

/// Centered two-plane estimate `(I+ - I-) / (2 dz)`.
pub fn derivative_2shot(i_plus: &RealImage, i_minus: &RealImage, dz: f64) -> Result<AxialDerivative> {
    if !(dz.is_finite() && dz > 0.0) {
        return Err(Error::invalid(format!("dz must be positive, got {dz}")));
    }
    let diff = i_plus.sub(i_minus)?;
    Ok(AxialDerivative::z(diff.scaled(1.0 / (2.0 * dz))))
}

/// Per-pixel least-squares polynomial fit of `I(z)`, differentiated at `z = 0`.
///
/// The fit uses a Legendre basis in `z / max|z|`, so high degrees stay well
/// conditioned. Because the estimate is linear in the data, it reduces to one
/// weight per plane; the weights come from the design-matrix pseudo-inverse.
pub fn derivative_polyfit(stack: &[RealImage], zs: &[f64], degree: usize) -> Result<AxialDerivative> {
    let weights = polyfit_derivative_weights(zs, degree)?;
    if stack.len() != zs.len() {
        return Err(Error::invalid(format!("{} planes but {} defocus distances", stack.len(), zs.len())));
    }
    for img in &stack[1..] {
        stack[0].check_same_grid(img)?;
    }
    let mut acc = Array2::zeros(stack[0].data().dim());
    for (img, &w) in stack.iter().zip(&weights) {
        acc.scaled_add(w, img.data());
    }
    Ok(AxialDerivative::z(RealImage::new(acc, stack[0].pitch())?))
}

/// Linear weights `w_i` such that `sum_i w_i I(z_i)` is the fitted `dI/dz(0)`.
pub fn polyfit_derivative_weights(zs: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = zs.len();
    let m = degree + 1;
    if n < m {
        return Err(Error::invalid(format!("degree {degree} fit needs at least {m} planes, got {n}")));
    }
    if zs.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("defocus distances must be finite"));
    }
    let scale = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    if scale == 0.0 {
        return Err(Error::RankDeficient("all defocus distances are zero".into()));
    }
    let a = DMatrix::from_fn(n, m, |i, k| legendre(m, zs[i] / scale).value[k]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::RankDeficient(format!(
            "condition number {:.3e} (duplicate defocus distances?)",
            smax / smin
        )));
    }
    let pinv = svd.pseudo_inverse(0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let dp0 = legendre(m, 0.0).d1;
    Ok((0..n).map(|i| (0..m).map(|k| dp0[k] * pinv[(k, i)]).sum::<f64>() / scale).collect())
}

/// Finite-difference scheme across the colour channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChromaticMode {
    /// Least-squares slope through all three `(xi_c, I_c)` points.
    #[default]
    LeastSquares,
    /// Difference between the longest and shortest wavelength channels.
    TwoPoint,
}

/// `dI/dxi` from one RGB exposure at fixed `z`, using `xi_c = lambda_c z`.
pub fn derivative_chromatic(
    channels: &[RealImage; 3],
    lambdas: [f64; 3],
    z: f64,
    mode: ChromaticMode,
) -> Result<AxialDerivative> {
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::invalid(format!("z must be positive, got {z}")));
    }
    channels[0].check_same_grid(&channels[1])?;
    channels[0].check_same_grid(&channels[2])?;
    let xi = lambdas.map(|l| l * z);
    let span = xi.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    for i in 0..3 {
        for j in i + 1..3 {
            if (xi[i] - xi[j]).abs() <= 1e-12 * span {
                return Err(Error::invalid(format!("coincident xi values for channels {i} and {j}")));
            }
        }
    }
    let pitch = channels[0].pitch();
    let out = match mode {
        ChromaticMode::LeastSquares => {
            let mean = xi.iter().sum::<f64>() / 3.0;
            let d = xi.map(|x| x - mean);
            let sxx: f64 = d.iter().map(|v| v * v).sum();
            let w = d.map(|v| v / sxx);
            let mean_i = (channels[0].data() + channels[1].data() + channels[2].data()) / 3.0;
            let mut acc = Array2::zeros(channels[0].data().dim());
            for (img, &wc) in channels.iter().zip(&w) {
                acc.scaled_add(wc, &(img.data() - &mean_i));
            }
            acc
        }
        ChromaticMode::TwoPoint => {
            let hi = (0..3).max_by(|&a, &b| xi[a].total_cmp(&xi[b])).unwrap();
            let lo = (0..3).min_by(|&a, &b| xi[a].total_cmp(&xi[b])).unwrap();
            (channels[hi].data() - channels[lo].data()) / (xi[hi] - xi[lo])
        }
    };
    Ok(AxialDerivative::xi(RealImage::new(out, pitch)?))
}

/// Divide each channel by its spatial mean, removing per-channel sensor gain.
pub fn normalize_channel_gains(channels: &[RealImage; 3]) -> Result<[RealImage; 3]> {
    for (c, img) in channels.iter().enumerate() {
        if img.mean() <= 0.0 {
            return Err(Error::DegenerateInput(format!("channel {c} has non-positive mean")));
        }
    }
    Ok(channels.clone().map(|img| {
        let m = img.mean();
        img.scaled(1.0 / m)
    }))
}

/// Pixelwise mean of the channels.
pub fn mean_channel(channels: &[RealImage; 3]) -> Result<RealImage> {
    channels[0].check_same_grid(&channels[1])?;
    channels[0].check_same_grid(&channels[2])?;
    let sum = channels[0].data() + channels[1].data() + channels[2].data();
    RealImage::new(sum / 3.0, channels[0].pitch())
}
