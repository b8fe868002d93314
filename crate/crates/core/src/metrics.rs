//! Phase-map evaluation metrics: gauge-free MAE and multi-scale SSIM.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PhaseMap;

/// Canonical MS-SSIM scale weights, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: &PhaseMap, b: &PhaseMap) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::GridMismatch(format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    Ok(())
}

/// Mean absolute error after removing each map's mean (phase is only defined
/// up to an additive constant).
pub fn mae(a: &PhaseMap, b: &PhaseMap) -> Result<f64> {
    check_dims(a, b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let total: f64 = Zip::from(a.data()).and(b.data()).fold(0.0, |acc, &x, &y| acc + ((x - ma) - (y - mb)).abs());
    Ok(total / a.data().len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" convolution with the SSIM window.
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let n = win.len();
    let (h, w) = img.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(r, c)| (0..n).map(|k| win[k] * img[[r, c + k]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(r, c)| (0..n).map(|k| win[k] * rows[[r + k, c]]).sum::<f64>())
}

/// `(mean ssim, mean contrast-structure)` at one scale.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>, c1: f64, c2: f64, win: &[f64]) -> (f64, f64) {
    let mu_a = filter_valid(a, win);
    let mu_b = filter_valid(b, win);
    let aa = filter_valid(&(a * a), win);
    let bb = filter_valid(&(b * b), win);
    let ab = filter_valid(&(a * b), win);
    let n = mu_a.len() as f64;
    let mut ssim = 0.0;
    let mut cs = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        let l_i = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += cs_i;
        ssim += l_i * cs_i;
    }
    (ssim / n, cs / n)
}

fn downsample(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(r, c)| {
        0.25 * (a[[2 * r, 2 * c]] + a[[2 * r + 1, 2 * c]] + a[[2 * r, 2 * c + 1]] + a[[2 * r + 1, 2 * c + 1]])
    })
}

/// Largest level count `<= requested` such that the coarsest scale still
/// fits the 11-pixel window.
pub fn supported_levels(width: usize, height: usize, requested: usize) -> usize {
    let m = width.min(height);
    let mut levels = requested.clamp(1, MS_SSIM_WEIGHTS.len());
    while levels > 1 && m < (1 << (levels - 1)) * SSIM_WINDOW {
        levels -= 1;
    }
    levels
}

/// Multi-scale SSIM with an 11x11 Gaussian window (sigma 1.5), 2x2 average
/// downsampling and the canonical five scale weights.
///
/// Both inputs are shifted by their joint minimum so they are non-negative;
/// the dynamic range is the joint maximum after the shift. If the images are
/// too small for `levels` scales, fewer are used (with a warning) and the
/// leading weights are renormalized to sum to one. Negative per-scale terms
/// are clamped to zero, so the score lies in `[0, 1]`.
pub fn ms_ssim(a: &PhaseMap, b: &PhaseMap, levels: usize) -> Result<f64> {
    check_dims(a, b)?;
    if levels == 0 {
        return Err(Error::invalid("MS-SSIM needs at least one level"));
    }
    let (w, h) = (a.width(), a.height());
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "MS-SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let used = supported_levels(w, h, levels);
    if used < levels.min(MS_SSIM_WEIGHTS.len()) {
        log::warn!("MS-SSIM: {w}x{h} image supports {used} of {levels} levels; using {used}");
    }
    let lo = a.min().min(b.min());
    let mut x = a.data().mapv(|v| v - lo);
    let mut y = b.data().mapv(|v| v - lo);
    let range = x.iter().chain(y.iter()).copied().fold(0.0f64, f64::max);
    if range == 0.0 {
        // Two identical constant images.
        return Ok(1.0);
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let weights = &MS_SSIM_WEIGHTS[..used];
    let wsum: f64 = weights.iter().sum();
    let win = gaussian_window();
    let mut score = 1.0;
    for (level, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, c1, c2, &win);
        let term = if level + 1 == used { ssim } else { cs };
        score *= term.max(0.0).powf(wt / wsum);
        if level + 1 < used {
            x = downsample(&x);
            y = downsample(&y);
        }
    }
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub ms_ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub ms_ssim_mean: f64,
    pub ms_ssim_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl MetricReport {
    /// Evaluate `(prediction, truth)` pairs in order. Both maps are made
    /// zero-mean before MS-SSIM, matching the gauge of the TIE solvers.
    pub fn evaluate(pairs: &[(PhaseMap, PhaseMap)], levels: usize) -> Result<Self> {
        let per_sample = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, t))| {
                Ok(SampleMetrics {
                    sample_id: i,
                    ms_ssim: ms_ssim(&p.zero_mean(), &t.zero_mean(), levels)?,
                    mae: mae(p, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (ms_ssim_mean, ms_ssim_std) = mean_std(per_sample.iter().map(|s| s.ms_ssim));
        let (mae_mean, mae_std) = mean_std(per_sample.iter().map(|s| s.mae));
        Ok(Self { per_sample, ms_ssim_mean, ms_ssim_std, mae_mean, mae_std })
    }
}
