//! Monte Carlo checks of the forward-SDE mean, the centered process and the
//! moment identity behind the zero-mean bound.
//!
//! Every check compares empirical moments against closed forms with a stated
//! confidence (three standard errors) or tolerance; none compares paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::sample_seed;
use crate::error::{Error, Result};

/// Rate `beta(t)` of the forward SDE `dY = -beta Y / 2 dt + sqrt(beta) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateFunction {
    Constant {
        b: f64,
    },
    /// `beta(t) = b0 + (b1 - b0) t`.
    Linear {
        b0: f64,
        b1: f64,
    },
}

impl RateFunction {
    pub fn beta(&self, t: f64) -> f64 {
        match *self {
            RateFunction::Constant { b } => b,
            RateFunction::Linear { b0, b1 } => b0 + (b1 - b0) * t,
        }
    }

    /// `int_0^t beta(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        match *self {
            RateFunction::Constant { b } => b * t,
            RateFunction::Linear { b0, b1 } => b0 * t + 0.5 * (b1 - b0) * t * t,
        }
    }

    /// `gamma(t) = exp(-int_0^t beta)`.
    pub fn gamma(&self, t: f64) -> f64 {
        (-self.integral(t)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub rate: RateFunction,
    pub steps: usize,
    pub paths: usize,
    pub dim: usize,
    pub seed: u64,
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 10 {
            return Err(Error::invalid(format!("need at least 10 steps, got {}", self.steps)));
        }
        if self.paths < 100 {
            return Err(Error::invalid(format!("need at least 100 paths, got {}", self.paths)));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        Ok(())
    }
}

/// Empirical moments of `Y_t` across paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Per-coordinate sample variance.
    pub var: Vec<f64>,
    /// Standard error of each coordinate mean.
    pub se_mean: Vec<f64>,
    /// Mean over paths of the coordinate average, and its standard error.
    pub coord_avg: f64,
    pub se_coord_avg: f64,
    /// Trace of the sample covariance and its standard error.
    pub cov_trace: f64,
    pub se_cov_trace: f64,
}

fn mean_se(v: impl Iterator<Item = f64> + Clone, n: f64) -> (f64, f64) {
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn moments(t: f64, states: &[&[f64]]) -> Moments {
    let n = states.len() as f64;
    let d = states[0].len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    let mut se_mean = vec![0.0; d];
    for i in 0..d {
        let (m, se) = mean_se(states.iter().map(|s| s[i]), n);
        mean[i] = m;
        se_mean[i] = se;
        var[i] = se * se * n;
    }
    let (coord_avg, se_coord_avg) = mean_se(states.iter().map(|s| s.iter().sum::<f64>() / d as f64), n);
    // unbiased trace: mean of ||y - ybar||^2 scaled by n / (n - 1)
    let q = states.iter().map(|s| s.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * n / (n - 1.0));
    let (cov_trace, se_cov_trace) = mean_se(q, n);
    Moments { t, mean, var, se_mean, coord_avg, se_coord_avg, cov_trace, se_cov_trace }
}

/// Euler-Maruyama simulation of the forward SDE with step `1 / steps`,
/// recording moments at `times` (rounded to the step grid).
///
/// Path `p` draws its initial value (via `y0`) and its Brownian increments
/// from a stream seeded by `(seed, p)`; the reduction over paths runs in a
/// fixed order, so results do not depend on the thread count.
pub fn simulate_forward_paths<F>(y0: F, cfg: &SdeConfig, times: &[f64]) -> Result<Vec<Moments>>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let record: Vec<usize> = times
        .iter()
        .map(|&t| {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("record time {t} outside [0, 1]")));
            }
            Ok((t * cfg.steps as f64).round() as usize)
        })
        .collect::<Result<_>>()?;
    let max_rate = (0..cfg.steps).map(|n| cfg.rate.beta(n as f64 * dt)).fold(0.0, f64::max);
    if max_rate * dt > 0.5 {
        log::warn!("Euler-Maruyama step too coarse: max beta * dt = {:.3}", max_rate * dt);
    }
    let last = record.iter().copied().max().unwrap_or(0);
    let per_path: Vec<Vec<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, p as u64));
            let mut y = y0(&mut rng);
            let mut out = vec![Vec::new(); record.len()];
            for n in 0..=last {
                for (slot, &r) in record.iter().enumerate() {
                    if r == n {
                        out[slot] = y.clone();
                    }
                }
                if n == last {
                    break;
                }
                let b = cfg.rate.beta(n as f64 * dt);
                let drift = 1.0 - 0.5 * b * dt;
                let diff = (b * dt).sqrt();
                for v in y.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = drift * *v + diff * z;
                }
            }
            out
        })
        .collect();
    if per_path.first().and_then(|p| p.first()).is_some_and(|y| y.len() != cfg.dim) {
        return Err(Error::invalid("initial-value sampler returned the wrong dimension"));
    }
    Ok(times
        .iter()
        .enumerate()
        .map(|(slot, &t)| {
            let states: Vec<&[f64]> = per_path.iter().map(|p| p[slot].as_slice()).collect();
            moments(t, &states)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaPoint {
    pub t: f64,
    /// `||mean(Y_t) - sqrt(gamma(t)) mu0|| / ||mu0||`, or the largest
    /// coordinate error in standard errors when `mu0 = 0`.
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub rate: RateFunction,
    pub points: Vec<LemmaPoint>,
    pub passed: bool,
}

/// Check `E[Y_t] = sqrt(gamma(t)) mu0` for paths started at `mu0`.
pub fn check_lemma_mean(cfg: &SdeConfig, mu0: &[f64], times: &[f64], tolerance: f64) -> Result<LemmaReport> {
    if mu0.len() != cfg.dim {
        return Err(Error::ShapeMismatch { expected: vec![cfg.dim], got: vec![mu0.len()] });
    }
    let start = mu0.to_vec();
    let moments = simulate_forward_paths(|_| start.clone(), cfg, times)?;
    let norm = mu0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let points: Vec<LemmaPoint> = moments
        .iter()
        .map(|m| {
            let s = cfg.rate.gamma(m.t).sqrt();
            if norm > 0.0 {
                let err = m.mean.iter().zip(mu0).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>().sqrt() / norm;
                LemmaPoint { t: m.t, error: err, tolerance, passed: err < tolerance }
            } else {
                // zero start: compare against three standard errors (t = 0 is exact)
                let z = m
                    .mean
                    .iter()
                    .zip(&m.se_mean)
                    .map(|(a, se)| {
                        if *se > 0.0 {
                            a.abs() / se
                        } else if *a == 0.0 {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    })
                    .fold(0.0, f64::max);
                LemmaPoint { t: m.t, error: z, tolerance: 3.0, passed: z < 3.0 }
            }
        })
        .collect();
    let passed = points.iter().all(|p| p.passed);
    Ok(LemmaReport { rate: cfg.rate, points, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredPoint {
    pub t: f64,
    /// Coordinate-averaged means of the two processes.
    pub mean_shifted: f64,
    pub mean_centered: f64,
    pub mean_z: f64,
    pub trace_shifted: f64,
    pub trace_centered: f64,
    pub trace_z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredReport {
    pub rate: RateFunction,
    pub points: Vec<CenteredPoint>,
    pub passed: bool,
}

/// Compare `Y_t - sqrt(gamma(t)) mu0` (with `Y_0 = mu0 + spread Z`) against
/// the same SDE started from `Y_0 - mu0`, using independent streams. The
/// coordinate-averaged mean and the covariance trace must agree within three
/// combined standard errors at every time.
pub fn check_centered_process(cfg: &SdeConfig, mu0: &[f64], spread: f64, times: &[f64]) -> Result<CenteredReport> {
    if mu0.len() != cfg.dim {
        return Err(Error::ShapeMismatch { expected: vec![cfg.dim], got: vec![mu0.len()] });
    }
    let start = |rng: &mut ChaCha8Rng, shift: bool| -> Vec<f64> {
        mu0.iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                if shift {
                    m + spread * z
                } else {
                    spread * z
                }
            })
            .collect()
    };
    let shifted = simulate_forward_paths(|r| start(r, true), cfg, times)?;
    let other = SdeConfig { seed: sample_seed(cfg.seed, u64::MAX - 1), ..*cfg };
    let centered = simulate_forward_paths(|r| start(r, false), &other, times)?;
    let avg0 = mu0.iter().sum::<f64>() / mu0.len() as f64;
    let points: Vec<CenteredPoint> = shifted
        .iter()
        .zip(&centered)
        .map(|(a, b)| {
            let s = cfg.rate.gamma(a.t).sqrt();
            // subtracting the deterministic mean path shifts the mean only
            let ma = a.coord_avg - s * avg0;
            let z = |x: f64, y: f64, sx: f64, sy: f64| {
                let se = (sx * sx + sy * sy).sqrt();
                if se > 0.0 {
                    (x - y).abs() / se
                } else if (x - y).abs() < 1e-12 * (1.0 + x.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            };
            let mean_z = z(ma, b.coord_avg, a.se_coord_avg, b.se_coord_avg);
            let trace_z = z(a.cov_trace, b.cov_trace, a.se_cov_trace, b.se_cov_trace);
            CenteredPoint {
                t: a.t,
                mean_shifted: ma,
                mean_centered: b.coord_avg,
                mean_z,
                trace_shifted: a.cov_trace,
                trace_centered: b.cov_trace,
                trace_z,
                passed: mean_z < 3.0 && trace_z < 3.0,
            }
        })
        .collect();
    let passed = points.iter().all(|p| p.passed);
    Ok(CenteredReport { rate: cfg.rate, points, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// `mean ||y - mu0||^2`.
    pub centered: f64,
    /// `mean ||y||^2 - ||mu0||^2`.
    pub expanded: f64,
    /// `mean ||y||^2`, the second moment of the uncentered data.
    pub raw: f64,
    /// `|centered - expanded| / raw`.
    pub rel_error: f64,
    pub passed: bool,
}

/// Check `mean ||y - mu0||^2 = mean ||y||^2 - ||mu0||^2` with `mu0` the
/// empirical mean; this is why the centered second moment never exceeds the
/// raw one.
pub fn check_moment_identity(ys: &[Vec<f64>], tolerance: f64) -> Result<MomentReport> {
    let first = ys.first().ok_or_else(|| Error::invalid("moment identity needs at least one sample"))?;
    let d = first.len();
    if ys.iter().any(|y| y.len() != d) {
        return Err(Error::invalid("samples have different dimensions"));
    }
    let n = ys.len() as f64;
    let mu: Vec<f64> = (0..d).map(|i| ys.iter().map(|y| y[i]).sum::<f64>() / n).collect();
    let centered = ys.iter().map(|y| y.iter().zip(&mu).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum::<f64>() / n;
    let raw = ys.iter().map(|y| y.iter().map(|a| a * a).sum::<f64>()).sum::<f64>() / n;
    let expanded = raw - mu.iter().map(|m| m * m).sum::<f64>();
    let rel_error = if raw > 0.0 { (centered - expanded).abs() / raw } else { (centered - expanded).abs() };
    Ok(MomentReport { centered, expanded, raw, rel_error, passed: rel_error <= tolerance && centered <= raw })
}

/// Settings for the full verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub rates: Vec<f64>,
    pub times: Vec<f64>,
    pub steps: usize,
    pub paths: usize,
    pub dim: usize,
    pub datasets: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            rates: vec![0.5, 2.0, 10.0],
            times: vec![0.25, 0.5, 1.0],
            steps: 1000,
            paths: 10_000,
            dim: 4,
            datasets: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub lemma_mean: Vec<LemmaReport>,
    pub centered_process: Vec<CenteredReport>,
    pub moment_identity: Vec<MomentReport>,
    pub passed: bool,
}

/// Run every check for each constant rate in `cfg.rates`.
pub fn verify_all(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let mu0 = vec![1.0; cfg.dim];
    let mut lemma_mean = Vec::new();
    let mut centered_process = Vec::new();
    for (i, &b) in cfg.rates.iter().enumerate() {
        let sde = SdeConfig {
            rate: RateFunction::Constant { b },
            steps: cfg.steps,
            paths: cfg.paths,
            dim: cfg.dim,
            seed: sample_seed(cfg.seed, i as u64),
        };
        lemma_mean.push(check_lemma_mean(&sde, &mu0, &cfg.times, 0.02)?);
        centered_process.push(check_centered_process(&sde, &mu0, 0.5, &cfg.times)?);
    }
    let moment_identity = (0..cfg.datasets)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ 0xD47A, k as u64));
            let n = rng.gen_range(2..200);
            let offset: f64 = rng.gen_range(-10.0..10.0);
            let ys: Vec<Vec<f64>> =
                (0..n).map(|_| (0..cfg.dim).map(|_| offset + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            check_moment_identity(&ys, 1e-10)
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = lemma_mean.iter().all(|r| r.passed)
        && centered_process.iter().all(|r| r.passed)
        && moment_identity.iter().all(|r| r.passed);
    Ok(TheoryReport { lemma_mean, centered_process, moment_identity, passed })
}
