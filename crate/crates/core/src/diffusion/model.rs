use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{Dual, LearnedSchedule, ScheduleSpec};
use super::{
    ancestral_sample, cvdm_sample, gaussian, LossTerms, LossWeights, MeanPredictor, NoisePredictor, NoiseSchedule,
};
use crate::dataset::sample_seed;
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, Optimizer, OptimizerConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of sampler steps `T`.
    pub steps: usize,
    /// Weight of the curvature term.
    pub a: f64,
    /// Weight of the mean-predictor term.
    pub omega: f64,
    /// Zero-mean diffusion on residuals; plain conditional diffusion when
    /// false.
    pub centered: bool,
    /// Let the noise loss update the schedule parameters.
    #[serde(default)]
    pub noise_trains_schedule: bool,
    /// What the constant time channel of the noise network holds.
    #[serde(default)]
    pub time_input: TimeInput,
    /// Add the linear denoiser `sqrt(1 - gamma) y_t / (gamma s^2 + 1 - gamma)`
    /// to the noise network output, with the data variance `s^2` learned.
    #[serde(default = "enabled")]
    pub linear_skip: bool,
}

fn enabled() -> bool {
    true
}

/// Encoding of diffusion time fed to the noise network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInput {
    /// `t` itself.
    #[default]
    Time,
    /// `ln((1 - gamma) / gamma) / 4`, clamped to `[-5, 5]`, computed from the
    /// schedule without gradient.
    LogSnr,
}

impl TimeInput {
    fn encode(self, t: f64, gamma: f64) -> f64 {
        match self {
            TimeInput::Time => t,
            TimeInput::LogSnr => {
                let l = (1.0 - gamma).max(1e-300).ln() - gamma.max(1e-300).ln();
                (0.25 * l).clamp(-5.0, 5.0)
            }
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            a: 1e-3,
            omega: 2.0,
            centered: true,
            noise_trains_schedule: false,
            time_input: TimeInput::Time,
            linear_skip: true,
        }
    }
}

/// One conditioning input and its target, both `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x: Tensor,
    pub y: Tensor,
}

/// Diffusion time and noise drawn for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: f64,
    pub eps: Tensor,
}

impl Draw {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let t = rng.gen();
        Self { t, eps: gaussian(shape, rng) }
    }
}

/// Noise network, mean network and learned schedule.
///
/// The noise network sees `[y_t, X, t]` stacked along channels, with `t` as
/// a constant channel. The flat parameter vector is the noise network, then
/// the mean network, then the schedule, then `ln s^2` when the linear skip is
/// enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub noise_net: Network,
    pub mean_net: Network,
    pub schedule: LearnedSchedule,
    log_data_var: Option<f64>,
}

/// Linear denoiser slope and its derivatives with respect to `ln s^2` and
/// `gamma`.
fn skip_coefficient(g: f64, log_var: f64) -> (f64, f64, f64) {
    let s2 = log_var.exp();
    let r = (1.0 - g).max(0.0).sqrt();
    let d = g * s2 + 1.0 - g;
    let a = r / d;
    let da_dlog = -r * g * s2 / (d * d);
    let da_dg = if r > 0.0 { -0.5 / (r * d) - r * (s2 - 1.0) / (d * d) } else { 0.0 };
    (a, da_dlog, da_dg)
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, noise: NetworkSpec, mean: NetworkSpec, schedule: ScheduleSpec) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if !(config.a >= 0.0 && config.omega >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        let noise_net = Network::new(noise)?;
        let mean_net = Network::new(mean)?;
        let (xc, yc) = (mean_net.in_channels(), mean_net.out_channels());
        if noise_net.in_channels() != yc + xc + 1 || noise_net.out_channels() != yc {
            return Err(Error::invalid(format!(
                "noise network maps {} -> {} channels; expected {} -> {yc}",
                noise_net.in_channels(),
                noise_net.out_channels(),
                yc + xc + 1
            )));
        }
        if schedule.conditioned && schedule.embed_dim != xc {
            return Err(Error::invalid(format!(
                "schedule embedding has {} dims, X has {xc} channels",
                schedule.embed_dim
            )));
        }
        let schedule = LearnedSchedule::new(schedule)?;
        let log_data_var = config.linear_skip.then_some(0.0);
        Ok(Self { config, noise_net, mean_net, schedule, log_data_var })
    }

    /// Residual conv noise network (six convolutions) and four-layer conv
    /// mean network for image-shaped data.
    pub fn image(
        x_channels: usize,
        y_channels: usize,
        width: usize,
        seed: u64,
        config: DiffusionConfig,
    ) -> Result<Self> {
        Self::new(
            config,
            NetworkSpec::residual_conv(y_channels + x_channels + 1, y_channels, width, seed),
            NetworkSpec::plain_conv(x_channels, y_channels, width, seed.wrapping_add(1)),
            ScheduleSpec { conditioned: true, embed_dim: x_channels, ..Default::default() },
        )
    }

    /// Pointwise networks for vector data held as `[dim, 1, 1]` tensors. The
    /// mean network is affine.
    pub fn vector(
        x_dim: usize,
        y_dim: usize,
        hidden: usize,
        depth: usize,
        seed: u64,
        config: DiffusionConfig,
    ) -> Result<Self> {
        let mut noise = NetworkSpec::mlp(y_dim + x_dim + 1, y_dim, hidden, depth, seed);
        noise.zero_last = true;
        Self::new(config, noise, NetworkSpec::mlp(x_dim, y_dim, 0, 0, seed.wrapping_add(1)), ScheduleSpec::default())
    }

    pub fn x_channels(&self) -> usize {
        self.mean_net.in_channels()
    }

    pub fn y_channels(&self) -> usize {
        self.mean_net.out_channels()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { a: self.config.a, omega: self.config.omega, centered: self.config.centered }
    }

    pub fn num_params(&self) -> usize {
        self.noise_net.num_params()
            + self.mean_net.num_params()
            + self.schedule.num_params()
            + usize::from(self.log_data_var.is_some())
    }

    pub fn params(&self) -> Vec<f64> {
        let skip: Vec<f64> = self.log_data_var.into_iter().collect();
        [self.noise_net.params(), self.mean_net.params(), self.schedule.params(), &skip].concat()
    }

    /// Learned data variance `s^2` of the linear skip, if enabled.
    pub fn data_variance(&self) -> Option<f64> {
        self.log_data_var.map(f64::exp)
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: vec![self.num_params()], got: vec![p.len()] });
        }
        let (a, rest) = p.split_at(self.noise_net.num_params());
        let (b, rest) = rest.split_at(self.mean_net.num_params());
        let (c, d) = rest.split_at(self.schedule.num_params());
        self.noise_net.set_params(a)?;
        self.mean_net.set_params(b)?;
        self.schedule.set_params(c)?;
        if let Some(v) = self.log_data_var.as_mut() {
            *v = d[0];
        }
        Ok(())
    }

    /// Target shape for conditioning input `x`.
    pub fn y_shape(&self, x: &Tensor) -> Vec<usize> {
        let mut s = x.shape().to_vec();
        s[0] = self.y_channels();
        s
    }

    fn noise_input(&self, y_t: &Tensor, t: f64, gamma: f64, x: &Tensor) -> Result<Tensor> {
        let mut shape = y_t.shape().to_vec();
        shape[0] = 1;
        let v = self.config.time_input.encode(t, gamma);
        Tensor::concat_channels(&[y_t, x, &Tensor::filled(shape, v)])
    }

    fn check_pair(&self, p: &TrainPair) -> Result<()> {
        if p.x.channels() != self.x_channels() {
            return Err(Error::ShapeMismatch { expected: vec![self.x_channels()], got: p.x.shape().to_vec() });
        }
        let ys = self.y_shape(&p.x);
        if p.y.shape() != ys.as_slice() {
            return Err(Error::ShapeMismatch { expected: ys, got: p.y.shape().to_vec() });
        }
        Ok(())
    }

    /// Loss terms and exact flat parameter gradient for one sample. The
    /// residual fed to the diffusion terms does not propagate gradient into
    /// the mean network.
    pub fn sample_loss_grad(&self, pair: &TrainPair, draw: &Draw) -> Result<(LossTerms, Vec<f64>)> {
        self.check_pair(pair)?;
        let (x, y) = (&pair.x, &pair.y);
        let w = self.weights();
        let n_noise = self.noise_net.num_params();
        let n_mean = self.mean_net.num_params();
        let mut grad = vec![0.0; self.num_params()];

        let (residual, mean_loss) = if w.centered {
            let (mu, acts) = self.mean_net.forward_cached(x)?;
            let r = y.sub(&mu)?;
            let (_, gm) = self.mean_net.backward(&acts, &r.scale(-2.0 * w.omega))?;
            grad[n_noise..n_noise + n_mean].copy_from_slice(&gm);
            let m = r.sq_norm();
            (r, m)
        } else {
            (y.clone(), 0.0)
        };

        let e = self.schedule.embedding(x)?;
        let c = self.schedule.dual_coefficients(&e);
        let vt = self.schedule.eval_dual(&c, draw.t);
        let v0 = self.schedule.eval_dual(&c, 0.0);
        let v1 = self.schedule.eval_dual(&c, 1.0);
        let g = vt.gamma.v;
        if !(0.0..=1.0).contains(&g) || !(0.0..1.0).contains(&v1.gamma.v) {
            return Err(Error::ScheduleInvariant(format!("gamma({}) = {g}, gamma(1) = {}", draw.t, v1.gamma.v)));
        }

        let (sa, sb) = (g.sqrt(), (1.0 - g).sqrt());
        let y_t = residual.zip_map(&draw.eps, |r, e| sa * r + sb * e)?;
        let (mut est, acts) = self.noise_net.forward_cached(&self.noise_input(&y_t, draw.t, g, x)?)?;
        let skip = self.log_data_var.map(|lv| skip_coefficient(g, lv));
        if let Some((a, _, _)) = skip {
            est = est.zip_map(&y_t, |e, y| e + a * y)?;
        }
        let diff = est.sub(&draw.eps)?;
        let noise = 0.5 * diff.sq_norm();
        let (gin, gn) = self.noise_net.backward(&acts, &diff)?;
        grad[..n_noise].copy_from_slice(&gn);
        let diff_dot_y: f64 = diff.data().iter().zip(y_t.data()).map(|(a, b)| a * b).sum();
        if let Some((_, da_dlog, _)) = skip {
            grad[n_noise + n_mean + self.schedule.num_params()] = diff_dot_y * da_dlog;
        }

        let one = Dual::constant(1.0);
        let beta = (vt.gamma_dt + vt.beta * vt.gamma).square() + (v0.gamma - one).square() + v1.gamma.square();
        let curvature = vt.gamma_dt2.square();
        let d = residual.len() as f64;
        let prior = (-(one - v1.gamma).ln() - v1.gamma).scale(0.5 * d) + v1.gamma.scale(0.5 * residual.sq_norm());
        let sched = beta + prior + curvature.scale(w.a);
        let k = self.schedule.spec().basis;
        let mut dc = sched.d[..k].to_vec();
        if self.config.noise_trains_schedule && g > 0.0 && g < 1.0 {
            let dy_dg = residual.zip_map(&draw.eps, |r, e| r / (2.0 * sa) - e / (2.0 * sb))?;
            let mut dl_dg: f64 = gin.data()[..y_t.len()].iter().zip(dy_dg.data()).map(|(a, b)| a * b).sum();
            if let Some((a, _, da_dg)) = skip {
                let through_y: f64 = diff.data().iter().zip(dy_dg.data()).map(|(d, y)| d * y).sum();
                dl_dg += da_dg * diff_dot_y + a * through_y;
            }
            for (dk, gk) in dc.iter_mut().zip(&vt.gamma.d[..k]) {
                *dk += dl_dg * gk;
            }
        }
        self.schedule.param_grad(&dc, &e, &mut grad[n_noise + n_mean..]);

        let terms = LossTerms::combine(noise, beta.v, curvature.v, prior.v, mean_loss, &w);
        Ok((terms, grad))
    }

    /// Batch-mean loss and gradient. Samples are evaluated in parallel and
    /// reduced in a fixed order, so the result does not depend on the thread
    /// count.
    pub fn batch_loss_grad(&self, batch: &[TrainPair], draws: &[Draw]) -> Result<(LossTerms, Vec<f64>)> {
        if batch.is_empty() || batch.len() != draws.len() {
            return Err(Error::invalid("batch and draws must be non-empty and of equal length"));
        }
        let per: Vec<(LossTerms, Vec<f64>)> =
            batch.par_iter().zip(draws.par_iter()).map(|(p, d)| self.sample_loss_grad(p, d)).collect::<Result<_>>()?;
        let s = 1.0 / batch.len() as f64;
        let mut terms = LossTerms::default();
        let mut grad = vec![0.0; self.num_params()];
        for (t, g) in &per {
            terms.accumulate(t, s);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += s * b;
            }
        }
        Ok((terms, grad))
    }

    pub fn batch_loss(&self, batch: &[TrainPair], draws: &[Draw]) -> Result<LossTerms> {
        Ok(self.batch_loss_grad(batch, draws)?.0)
    }

    /// Draw one sample of `Y` given `x`; adds `mu(X)` back when centered.
    pub fn sample<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        if self.config.centered {
            ancestral_sample(x, &self.schedule, self, self, self.config.steps, rng)
        } else {
            cvdm_sample(x, &self.y_shape(x), &self.schedule, self, self.config.steps, rng)
        }
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict_noise(&self, y_t: &Tensor, t: f64, x: &Tensor) -> Result<Tensor> {
        let needs_gamma = self.config.time_input == TimeInput::LogSnr || self.log_data_var.is_some();
        let g = if needs_gamma { self.schedule.gamma(t, x)? } else { 0.0 };
        let est = self.noise_net.forward(&self.noise_input(y_t, t, g, x)?)?;
        match self.log_data_var {
            Some(lv) => {
                let a = skip_coefficient(g, lv).0;
                est.zip_map(y_t, |e, y| e + a * y)
            }
            None => Ok(est),
        }
    }
}

impl MeanPredictor for DiffusionModel {
    fn predict_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.mean_net.forward(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total step budget.
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 16, optimizer: OptimizerConfig::adam(1e-3), seed: 0 }
    }
}

/// Optimizer state and step counter; together with the model this is all a
/// resumed run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub optimizer: Optimizer,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, model: &DiffusionModel) -> Self {
        Self { optimizer: Optimizer::new(cfg.optimizer, model.num_params()), step: 0, seed: cfg.seed }
    }
}

/// Run training steps until `state.step == cfg.steps`, returning the
/// per-step loss trace.
///
/// Step `s` draws its batch indices, times and noise from a stream seeded by
/// `(seed, s)`, so resuming from a saved state reproduces an uninterrupted
/// run exactly.
pub fn train(
    data: &[TrainPair],
    model: &mut DiffusionModel,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<Vec<LossTerms>> {
    if state.step >= cfg.steps {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for p in data {
        model.check_pair(p)?;
    }
    if state.step == 0 && model.config.centered {
        // start the mean head at the data mean; Adam would otherwise need
        // ~offset/lr steps to move the bias there
        let mut bias = vec![0.0; model.y_channels()];
        for p in data {
            for (b, m) in bias.iter_mut().zip(p.y.channel_means()?) {
                *b += m / data.len() as f64;
            }
        }
        model.mean_net.set_output_bias(&bias)?;
    }
    let mut trace = Vec::with_capacity((cfg.steps - state.step) as usize);
    let mut params = model.params();
    while state.step < cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(state.seed, state.step));
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let p = &data[rng.gen_range(0..data.len())];
            draws.push(Draw::sample(p.y.shape(), &mut rng));
            batch.push(p.clone());
        }
        let (terms, grad) = model.batch_loss_grad(&batch, &draws)?;
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: state.step as usize, last_good: Box::new(model.clone()) });
        }
        state.optimizer.step(&mut params, &grad)?;
        model.set_params(&params)?;
        state.step += 1;
        trace.push(terms);
        if state.step.is_multiple_of(1000) {
            log::info!("step {}: loss {:.5} (mean {:.5})", state.step, terms.total, terms.mean);
        }
    }
    Ok(trace)
}
