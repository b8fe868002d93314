//! Conditional variational diffusion with learned schedules and the
//! zero-mean (residual) wrapper.
//!
//! The free functions here are generic over [`NoiseSchedule`],
//! [`NoisePredictor`] and [`MeanPredictor`] so that oracle predictors can be
//! injected. [`DiffusionModel`] binds them to trainable networks.

mod checkpoint;
mod model;
mod schedule;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::{train, DiffusionConfig, DiffusionModel, Draw, TimeInput, TrainConfig, TrainPair, TrainState};
pub use schedule::{
    AnalyticSchedule, LearnedSchedule, NoiseSchedule, ScheduleSpec, ScheduleValues, MAX_BASIS, QUADRATURE_NODES,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Largest per-step rate used by the discrete sampler.
pub const MAX_STEP_BETA: f64 = 0.999;

/// `eps(y_t, t, X)`: estimate of the noise that produced `y_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, y_t: &Tensor, t: f64, x: &Tensor) -> Result<Tensor>;
}

/// `mu(X)`: estimate of the conditional mean of `Y`.
pub trait MeanPredictor {
    fn predict_mean(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64, &Tensor) -> Tensor> NoisePredictor for F {
    fn predict_noise(&self, y_t: &Tensor, t: f64, x: &Tensor) -> Result<Tensor> {
        Ok(self(y_t, t, x))
    }
}

impl<F: Fn(&Tensor) -> Tensor> MeanPredictor for F {
    fn predict_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self(x))
    }
}

/// Standard normal tensor of the given shape.
pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn check_gamma(g: f64, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::ScheduleInvariant(format!("gamma({t}) = {g} is outside [0, 1]")));
    }
    Ok(())
}

/// `y_t = sqrt(gamma) y0 + sqrt(1 - gamma) eps`.
pub fn forward_sample<S: NoiseSchedule + ?Sized>(
    y0: &Tensor,
    t: f64,
    eps: &Tensor,
    schedule: &S,
    x: &Tensor,
) -> Result<Tensor> {
    let g = schedule.gamma(t, x)?;
    check_gamma(g, t)?;
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    y0.zip_map(eps, |y, e| a * y + b * e)
}

/// `0.5 ||eps - eps_hat(y_t, t, X)||^2` for given draws of `t` and `eps`.
pub fn loss_noise_at<S, E>(y0: &Tensor, x: &Tensor, t: f64, eps: &Tensor, schedule: &S, eps_pred: &E) -> Result<f64>
where
    S: NoiseSchedule + ?Sized,
    E: NoisePredictor + ?Sized,
{
    let y_t = forward_sample(y0, t, eps, schedule, x)?;
    let est = eps_pred.predict_noise(&y_t, t, x)?;
    Ok(0.5 * eps.sub(&est)?.sq_norm())
}

/// Single-draw Monte Carlo estimate of the noise loss with `t ~ U[0, 1)`.
pub fn loss_noise<S, E, R>(y0: &Tensor, x: &Tensor, schedule: &S, eps_pred: &E, rng: &mut R) -> Result<f64>
where
    S: NoiseSchedule + ?Sized,
    E: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let t: f64 = rng.gen();
    let eps = gaussian(y0.shape(), rng);
    loss_noise_at(y0, x, t, &eps, schedule, eps_pred)
}

/// Terms of the schedule consistency loss at one `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaTerms {
    /// `(dgamma/dt + beta gamma)^2`.
    pub ode: f64,
    /// `(gamma(0) - 1)^2`.
    pub start: f64,
    /// `gamma(1)^2`.
    pub end: f64,
}

impl BetaTerms {
    pub fn total(&self) -> f64 {
        self.ode + self.start + self.end
    }
}

pub fn loss_beta_terms<S: NoiseSchedule + ?Sized>(schedule: &S, x: &Tensor, t: f64) -> Result<BetaTerms> {
    let v = schedule.eval(t, x)?;
    let g0 = schedule.gamma(0.0, x)?;
    let g1 = schedule.gamma(1.0, x)?;
    Ok(BetaTerms { ode: (v.gamma_dt + v.beta * v.gamma).powi(2), start: (g0 - 1.0).powi(2), end: g1 * g1 })
}

pub fn loss_beta<S: NoiseSchedule + ?Sized, R: Rng + ?Sized>(schedule: &S, x: &Tensor, rng: &mut R) -> Result<f64> {
    Ok(loss_beta_terms(schedule, x, rng.gen())?.total())
}

/// `(d^2 gamma / dt^2)^2` at `t`.
pub fn loss_gamma_at<S: NoiseSchedule + ?Sized>(schedule: &S, x: &Tensor, t: f64) -> Result<f64> {
    Ok(schedule.eval(t, x)?.gamma_dt2.powi(2))
}

pub fn loss_gamma<S: NoiseSchedule + ?Sized, R: Rng + ?Sized>(schedule: &S, x: &Tensor, rng: &mut R) -> Result<f64> {
    loss_gamma_at(schedule, x, rng.gen())
}

/// `KL(N(sqrt(g) y0, (1 - g) I) || N(0, I))` with `g = gamma(1, X)`.
pub fn prior_kl(y0_sq_norm: f64, dim: usize, g: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&g) {
        return Err(Error::ScheduleInvariant(format!("gamma(1) = {g}: prior KL is infinite or undefined")));
    }
    Ok(0.5 * dim as f64 * (-(-g).ln_1p() - g) + 0.5 * g * y0_sq_norm)
}

pub fn loss_prior<S: NoiseSchedule + ?Sized>(y0: &Tensor, x: &Tensor, schedule: &S) -> Result<f64> {
    prior_kl(y0.sq_norm(), y0.len(), schedule.gamma(1.0, x)?)
}

/// `||y - mu(X)||^2`.
pub fn loss_mean<M: MeanPredictor + ?Sized>(y: &Tensor, x: &Tensor, mean_pred: &M) -> Result<f64> {
    Ok(y.sub(&mean_pred.predict_mean(x)?)?.sq_norm())
}

/// Loss weights and mode switches shared by the generic and model losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the curvature term.
    pub a: f64,
    /// Weight of the mean-predictor term.
    pub omega: f64,
    /// Diffuse residuals `Y - mu(X)` (zero-mean diffusion). When false the
    /// raw targets are diffused and the mean term is dropped.
    pub centered: bool,
}

/// Per-sample loss decomposition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub noise: f64,
    pub beta: f64,
    pub gamma: f64,
    pub prior: f64,
    pub mean: f64,
    pub total: f64,
}

impl LossTerms {
    pub(crate) fn combine(noise: f64, beta: f64, gamma: f64, prior: f64, mean: f64, w: &LossWeights) -> Self {
        let total = beta + prior + noise + w.a * gamma + w.omega * mean;
        Self { noise, beta, gamma, prior, mean, total }
    }

    pub(crate) fn accumulate(&mut self, o: &LossTerms, s: f64) {
        self.noise += s * o.noise;
        self.beta += s * o.beta;
        self.gamma += s * o.gamma;
        self.prior += s * o.prior;
        self.mean += s * o.mean;
        self.total += s * o.total;
    }
}

/// Zero-mean diffusion loss for one sample and fixed draws of `t`, `eps`:
/// the diffusion terms are evaluated on the residual `Y - mu(X)` (or on `Y`
/// when not centered) and `omega * ||Y - mu(X)||^2` is added.
#[allow(clippy::too_many_arguments)]
pub fn loss_zmd_terms<S, E, M>(
    y: &Tensor,
    x: &Tensor,
    t: f64,
    eps: &Tensor,
    schedule: &S,
    eps_pred: &E,
    mean_pred: &M,
    w: &LossWeights,
) -> Result<LossTerms>
where
    S: NoiseSchedule + ?Sized,
    E: NoisePredictor + ?Sized,
    M: MeanPredictor + ?Sized,
{
    let (residual, mean) = if w.centered {
        let r = y.sub(&mean_pred.predict_mean(x)?)?;
        let m = r.sq_norm();
        (r, m)
    } else {
        (y.clone(), 0.0)
    };
    let noise = loss_noise_at(&residual, x, t, eps, schedule, eps_pred)?;
    let beta = loss_beta_terms(schedule, x, t)?.total();
    let gamma = loss_gamma_at(schedule, x, t)?;
    let prior = loss_prior(&residual, x, schedule)?;
    Ok(LossTerms::combine(noise, beta, gamma, prior, mean, w))
}

/// Batch-mean zero-mean diffusion loss of `model` with one `(t, eps)` draw
/// per sample.
pub fn loss_zmd<R: Rng + ?Sized>(batch: &[TrainPair], model: &DiffusionModel, rng: &mut R) -> Result<f64> {
    let draws: Vec<Draw> = batch.iter().map(|p| Draw::sample(p.y.shape(), rng)).collect();
    Ok(model.batch_loss(batch, &draws)?.total)
}

/// Discrete per-step rates `beta_t = beta(t/T, X) / T` for `t = 1..=T`
/// (index 0 holds step 1), clamped to [`MAX_STEP_BETA`].
pub fn discrete_betas<S: NoiseSchedule + ?Sized>(schedule: &S, x: &Tensor, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    (1..=steps)
        .map(|t| {
            let b = schedule.beta(t as f64 / steps as f64, x)? / steps as f64;
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::ScheduleInvariant(format!("beta at step {t} is {b}")));
            }
            Ok(b.min(MAX_STEP_BETA))
        })
        .collect()
}

/// Cumulative products `gamma_t = prod_{s <= t} (1 - beta_s)`.
pub fn discrete_gammas(betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .scan(1.0, |g, b| {
            *g *= 1.0 - b;
            Some(*g)
        })
        .collect()
}

/// Reverse chain of the discrete sampler starting from `N(0, I)`; returns
/// the final state without any mean add-back.
pub fn reverse_chain<S, E, R>(
    x: &Tensor,
    y_shape: &[usize],
    schedule: &S,
    eps_pred: &E,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor>
where
    S: NoiseSchedule + ?Sized,
    E: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let betas = discrete_betas(schedule, x, steps)?;
    let gammas = discrete_gammas(&betas);
    let mut y = gaussian(y_shape, rng);
    for t in (1..=steps).rev() {
        let (b, g) = (betas[t - 1], gammas[t - 1]);
        let alpha = 1.0 - b;
        let est = eps_pred.predict_noise(&y, t as f64 / steps as f64, x)?;
        est.check_shape(&y)?;
        let c = b / (1.0 - g).sqrt();
        let s = 1.0 / alpha.sqrt();
        let noise_scale = if t > 1 { b.sqrt() } else { 0.0 };
        let data: Vec<f64> = y
            .data()
            .iter()
            .zip(est.data())
            .map(|(&yv, &ev)| {
                let z: f64 = if t > 1 { rng.sample(StandardNormal) } else { 0.0 };
                s * (yv - c * ev) + noise_scale * z
            })
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSampling { t });
        }
        y = Tensor::from_parts(y_shape.to_vec(), data);
    }
    Ok(y)
}

/// Ancestral sampling of the residual chain followed by adding `mu(X)`.
pub fn ancestral_sample<S, E, M, R>(
    x: &Tensor,
    schedule: &S,
    eps_pred: &E,
    mean_pred: &M,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor>
where
    S: NoiseSchedule + ?Sized,
    E: NoisePredictor + ?Sized,
    M: MeanPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mu = mean_pred.predict_mean(x)?;
    let r = reverse_chain(x, mu.shape(), schedule, eps_pred, steps, rng)?;
    r.add(&mu)
}

/// Ancestral sampling without mean subtraction (plain conditional diffusion).
pub fn cvdm_sample<S, E, R>(
    x: &Tensor,
    y_shape: &[usize],
    schedule: &S,
    eps_pred: &E,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor>
where
    S: NoiseSchedule + ?Sized,
    E: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    reverse_chain(x, y_shape, schedule, eps_pred, steps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn forward_sample_edges() {
        let x = v(&[0.0]);
        let y0 = v(&[1.0, -2.0, 3.0]);
        let eps = v(&[0.5, 0.1, -0.7]);
        let one = AnalyticSchedule::Constant { gamma: 1.0, beta: 0.0 };
        let zero = AnalyticSchedule::Constant { gamma: 0.0, beta: 0.0 };
        assert_eq!(forward_sample(&y0, 0.4, &eps, &one, &x).unwrap(), y0);
        assert_eq!(forward_sample(&y0, 0.4, &eps, &zero, &x).unwrap(), eps);
        let bad = AnalyticSchedule::Constant { gamma: 1.5, beta: 0.0 };
        assert!(matches!(forward_sample(&y0, 0.4, &eps, &bad, &x), Err(Error::ScheduleInvariant(_))));
    }

    #[test]
    fn beta_and_gamma_terms() {
        let x = v(&[0.0]);
        let b = 1.7;
        let t = loss_beta_terms(&AnalyticSchedule::Exponential { b }, &x, 0.3).unwrap();
        assert!(t.ode < 1e-30 && t.start == 0.0);
        assert!((t.end - (-2.0 * b).exp()).abs() < 1e-15);
        let lin = loss_beta_terms(&AnalyticSchedule::Linear, &x, 0.6).unwrap();
        assert!(lin.ode < 1e-30);
        let flat = loss_beta_terms(&AnalyticSchedule::Constant { gamma: 1.0, beta: 1.0 }, &x, 0.2).unwrap();
        assert_eq!((flat.ode, flat.start + flat.end), (1.0, 1.0));
        assert_eq!(loss_gamma_at(&AnalyticSchedule::Linear, &x, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn prior_examples() {
        assert_eq!(prior_kl(5.0, 3, 0.0).unwrap(), 0.0);
        let g: f64 = 0.3;
        let expect = 0.5 * 4.0 * (-(1.0 - g).ln() - g);
        assert!((prior_kl(0.0, 4, g).unwrap() - expect).abs() < 1e-15);
        assert!((prior_kl(2.0, 4, g).unwrap() - expect - 0.5 * g * 2.0).abs() < 1e-15);
        assert!(prior_kl(0.0, 4, 1.0).is_err());
    }

    #[test]
    fn mean_loss_examples() {
        let x = v(&[0.0]);
        let y = v(&[1.0, 2.0, 3.0]);
        let yc = y.clone();
        assert_eq!(loss_mean(&y, &x, &move |_: &Tensor| yc.clone()).unwrap(), 0.0);
        let shifted = y.map(|a| a + 1.0);
        assert_eq!(loss_mean(&y, &x, &move |_: &Tensor| shifted.clone()).unwrap(), 3.0);
    }

    #[test]
    fn telescoping_product() {
        let x = v(&[0.0]);
        let b = 2.3;
        let betas = discrete_betas(&AnalyticSchedule::Exponential { b }, &x, 10_000).unwrap();
        let g = *discrete_gammas(&betas).last().unwrap();
        let via_logs: f64 = betas.iter().map(|b| (1.0 - b).ln()).sum::<f64>().exp();
        assert!((g - via_logs).abs() < 1e-12);
        assert!((g - (-b).exp()).abs() < 1e-3);
    }

    #[test]
    fn degenerate_chain_returns_initial_draw_plus_mean() {
        let x = v(&[0.0]);
        let sched = AnalyticSchedule::Constant { gamma: 0.5, beta: 1e-12 };
        let zero_eps = |y: &Tensor, _t: f64, _x: &Tensor| Tensor::zeros(y.shape().to_vec());
        let mu = v(&[2.0, -1.0]);
        let m = mu.clone();
        let out =
            ancestral_sample(&x, &sched, &zero_eps, &move |_: &Tensor| m.clone(), 1, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap();
        let draw = gaussian(&[2, 1, 1], &mut ChaCha8Rng::seed_from_u64(3));
        for i in 0..2 {
            assert!((out.data()[i] - draw.data()[i] - mu.data()[i]).abs() < 1e-9);
        }
    }
}
