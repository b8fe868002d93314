//! Variance schedules: analytic forms for testing and the learnable
//! monotone parameterization used for training.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::poly::{gauss_legendre_unit, legendre};

/// `gamma`, `beta` and the first two time derivatives of `gamma` at one `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub gamma: f64,
    pub beta: f64,
    pub gamma_dt: f64,
    pub gamma_dt2: f64,
}

pub trait NoiseSchedule {
    fn eval(&self, t: f64, x: &Tensor) -> Result<ScheduleValues>;

    fn gamma(&self, t: f64, x: &Tensor) -> Result<f64> {
        Ok(self.eval(t, x)?.gamma)
    }

    fn beta(&self, t: f64, x: &Tensor) -> Result<f64> {
        Ok(self.eval(t, x)?.beta)
    }
}

/// Closed-form schedules, independent of `X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticSchedule {
    /// `beta = b`, `gamma = exp(-b t)`.
    Exponential { b: f64 },
    /// `gamma = 1 - t`, `beta = 1 / (1 - t)`.
    Linear,
    /// Constant values; not variance preserving unless `beta = 0`.
    Constant { gamma: f64, beta: f64 },
}

impl NoiseSchedule for AnalyticSchedule {
    fn eval(&self, t: f64, _x: &Tensor) -> Result<ScheduleValues> {
        Ok(match *self {
            AnalyticSchedule::Exponential { b } => {
                let g = (-b * t).exp();
                ScheduleValues { gamma: g, beta: b, gamma_dt: -b * g, gamma_dt2: b * b * g }
            }
            AnalyticSchedule::Linear => {
                ScheduleValues { gamma: 1.0 - t, beta: 1.0 / (1.0 - t), gamma_dt: -1.0, gamma_dt2: 0.0 }
            }
            AnalyticSchedule::Constant { gamma, beta } => ScheduleValues { gamma, beta, gamma_dt: 0.0, gamma_dt2: 0.0 },
        })
    }
}

/// Largest number of Legendre basis functions a learned schedule may use.
pub const MAX_BASIS: usize = 8;
/// Quadrature nodes used for the cumulative rate integral.
pub const QUADRATURE_NODES: usize = 16;

/// Forward-mode dual number carrying derivatives with respect to the
/// schedule coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; MAX_BASIS],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; MAX_BASIS] }
    }

    pub fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; MAX_BASIS];
        d[k] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= dv);
        Self { v, d }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }

    pub fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        self.chain(s, s * (1.0 - s))
    }

    pub fn softplus(self) -> Self {
        self.chain(softplus(self.v), sigmoid(self.v))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn scale(self, s: f64) -> Self {
        self.chain(self.v * s, s)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(mut self, o: Dual) -> Dual {
        self.v += o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a += b;
        }
        self
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + (-o)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; MAX_BASIS];
        for (k, x) in d.iter_mut().enumerate() {
            *x = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Dual-valued schedule quantities.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DualValues {
    pub gamma: Dual,
    pub beta: Dual,
    pub gamma_dt: Dual,
    pub gamma_dt2: Dual,
}

impl DualValues {
    pub fn values(&self) -> ScheduleValues {
        ScheduleValues {
            gamma: self.gamma.v,
            beta: self.beta.v,
            gamma_dt: self.gamma_dt.v,
            gamma_dt2: self.gamma_dt2.v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    /// Number of Legendre basis functions for the rate logit.
    pub basis: usize,
    /// Condition the coefficients on the channel means of `X`.
    pub conditioned: bool,
    /// Number of `X` channels when conditioned.
    pub embed_dim: usize,
    /// Initial constant rate `beta`.
    pub init_beta: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { basis: 6, conditioned: false, embed_dim: 0, init_beta: 5.0 }
    }
}

/// `beta(t, X) = softplus(g(t, X))` with `g(s, X) = sum_k c_k(X) P_k(2s - 1)`
/// and `c(X) = b + W e(X)`, where `e(X)` holds the channel means of `X`.
/// `gamma(t, X) = exp(-Gamma(t, X))` with `Gamma = int_0^t beta ds` by
/// Gauss-Legendre quadrature, so `gamma` is strictly decreasing with
/// `gamma(0) = 1`.
///
/// Parameters are laid out as `b` followed by `W` in row-major
/// `[basis, embed_dim]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedSchedule {
    spec: ScheduleSpec,
    params: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LearnedSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        if spec.basis == 0 || spec.basis > MAX_BASIS {
            return Err(Error::invalid(format!("schedule basis must be in 1..={MAX_BASIS}, got {}", spec.basis)));
        }
        if !(spec.init_beta.is_finite() && spec.init_beta > 0.0) {
            return Err(Error::invalid("initial beta must be positive"));
        }
        if spec.conditioned && spec.embed_dim == 0 {
            return Err(Error::invalid("conditioned schedule needs embed_dim > 0"));
        }
        let e = if spec.conditioned { spec.embed_dim } else { 0 };
        let mut params = vec![0.0; spec.basis * (1 + e)];
        params[0] = softplus_inv(spec.init_beta);
        let (nodes, weights) = gauss_legendre_unit(QUADRATURE_NODES);
        Ok(Self { spec, params, nodes, weights })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.params.len()], got: vec![p.len()] });
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Conditioning features `e(X)`; empty for a global schedule.
    pub fn embedding(&self, x: &Tensor) -> Result<Vec<f64>> {
        if !self.spec.conditioned {
            return Ok(Vec::new());
        }
        let e = x.channel_means()?;
        if e.len() != self.spec.embed_dim {
            return Err(Error::ShapeMismatch { expected: vec![self.spec.embed_dim], got: vec![e.len()] });
        }
        Ok(e)
    }

    pub fn coefficients(&self, embedding: &[f64]) -> Vec<f64> {
        let k = self.spec.basis;
        let e = embedding.len();
        (0..k)
            .map(|i| self.params[i] + (0..e).map(|j| self.params[k + i * e + j] * embedding[j]).sum::<f64>())
            .collect()
    }

    /// Map `dL/dc` to the flat parameter gradient.
    pub(crate) fn param_grad(&self, dc: &[f64], embedding: &[f64], out: &mut [f64]) {
        let k = self.spec.basis;
        let e = embedding.len();
        for i in 0..k {
            out[i] += dc[i];
            for j in 0..e {
                out[k + i * e + j] += dc[i] * embedding[j];
            }
        }
    }

    pub(crate) fn dual_coefficients(&self, embedding: &[f64]) -> Vec<Dual> {
        self.coefficients(embedding).into_iter().enumerate().map(|(k, v)| Dual::variable(v, k)).collect()
    }

    /// Logit `g`, `g'` and `g''` at `s`.
    fn logit(&self, c: &[Dual], s: f64) -> (Dual, Dual, Dual) {
        let l = legendre(c.len(), 2.0 * s - 1.0);
        let mut g = Dual::constant(0.0);
        let mut g1 = Dual::constant(0.0);
        let mut g2 = Dual::constant(0.0);
        for (k, &ck) in c.iter().enumerate() {
            g = g + ck.scale(l.value[k]);
            g1 = g1 + ck.scale(2.0 * l.d1[k]);
            g2 = g2 + ck.scale(4.0 * l.d2[k]);
        }
        (g, g1, g2)
    }

    pub(crate) fn eval_dual(&self, c: &[Dual], t: f64) -> DualValues {
        let mut cum = Dual::constant(0.0);
        let mut cum_dt = Dual::constant(0.0);
        let mut cum_dt2 = Dual::constant(0.0);
        for (&u, &w) in self.nodes.iter().zip(&self.weights) {
            let (g, g1, g2) = self.logit(c, t * u);
            let sp = g.softplus();
            let sg = g.sigmoid();
            let dsg = sg * (Dual::constant(1.0) - sg);
            cum = cum + sp.scale(w);
            cum_dt = cum_dt + (sp + (sg * g1).scale(t * u)).scale(w);
            cum_dt2 = cum_dt2 + ((sg * g1).scale(2.0 * u) + (dsg * g1 * g1 + sg * g2).scale(t * u * u)).scale(w);
        }
        cum = cum.scale(t);
        let gamma = (-cum).exp();
        let beta = self.logit(c, t).0.softplus();
        let gamma_dt = -(cum_dt * gamma);
        let gamma_dt2 = (cum_dt * cum_dt - cum_dt2) * gamma;
        DualValues { gamma, beta, gamma_dt, gamma_dt2 }
    }
}

impl NoiseSchedule for LearnedSchedule {
    fn eval(&self, t: f64, x: &Tensor) -> Result<ScheduleValues> {
        let e = self.embedding(x)?;
        let c: Vec<Dual> = self.coefficients(&e).into_iter().map(Dual::constant).collect();
        Ok(self.eval_dual(&c, t).values())
    }
}
