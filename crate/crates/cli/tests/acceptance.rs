//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use qpi_core::dataset::{procedural_sources, simulate_dataset, SimulationSpec};
use qpi_core::diffusion::{
    gaussian, train, DiffusionConfig, DiffusionModel, Draw, NoiseSchedule, TimeInput, TrainConfig, TrainPair,
    TrainState,
};
use qpi_core::metrics::{mae, ms_ssim};
use qpi_core::nn::{LayerSpec, Network, NetworkSpec, OptimizerConfig, Tensor};
use qpi_core::optics::*;
use qpi_core::theory::{verify_all, TheoryConfig};
use qpi_core::tie::*;
use qpi_core::{ComplexField, RealImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

const PITCH: f64 = 0.5 * UM;

struct Check {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Check {
    Check { passed, detail: detail.into() }
}

fn run(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let c = f();
    let el = t0.elapsed();
    let in_time = limit.is_none_or(|l| el <= l);
    let ok = c.passed && in_time;
    let budget = limit.map(|l| format!(" (limit {:.0} s)", l.as_secs_f64())).unwrap_or_default();
    println!("{} {name}: {}; {:.1} s{budget}", if ok { "PASS" } else { "FAIL" }, c.detail, el.as_secs_f64());
    ok
}

fn optics_unitarity() -> Check {
    let worst = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((64, 64), |_| {
                Complex64::from_polar(rng.gen_range(0.2..1.5), rng.gen_range(-PI..PI))
            });
            let f = ComplexField::new(data, PITCH).unwrap();
            let e0 = f.energy();
            let (mut de, mut dinv) = (0.0f64, 0.0f64);
            for _ in 0..10 {
                let z = rng.gen_range(-5.0..5.0) * UM;
                let l = rng.gen_range(400.0..700.0) * NM;
                let g = fresnel_propagate(&f, z, l).unwrap();
                de = de.max(((g.energy() - e0) / e0).abs());
                let back = fresnel_propagate(&g, -z, l).unwrap();
                let d = back.data().iter().zip(f.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                dinv = dinv.max(d);
            }
            (de, dinv)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    check(
        worst.0 < 1e-9 && worst.1 < 1e-8,
        format!("max energy rel err {:.1e} (< 1e-9), max inversion err {:.1e} (< 1e-8)", worst.0, worst.1),
    )
}

fn tie_round_trip() -> Check {
    let lambda = 630.0 * NM;
    let truth = RealImage::from_fn(64, 64, PITCH, |_, c| 0.2 * (2.0 * PI * c as f64 / 16.0).cos()).unwrap();
    let f = ComplexField::from_phase(&truth).unwrap();
    let p = intensity(&fresnel_propagate(&f, 0.5 * UM, lambda).unwrap());
    let m = intensity(&fresnel_propagate(&f, -0.5 * UM, lambda).unwrap());
    let d = derivative_2shot(&p, &m, 0.5 * UM).unwrap();
    let k = 2.0 * PI / lambda;
    let eps = default_tikhonov(&p);
    let phi = solve_pure_phase(&d, 1.0, k, eps).unwrap();
    let err = mae(&phi, &truth).unwrap();
    let flat = RealImage::constant(64, 64, PITCH, 1.0).unwrap();
    let teague = solve_teague(&d, &flat, k, eps, 1e-3).unwrap();
    let diff = teague.data().iter().zip(phi.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(err < 0.02 && diff < 1e-10, format!("MAE {err:.4} rad (< 0.02), Teague vs pure-phase {diff:.1e} (< 1e-10)"))
}

fn chromatic_round_trip() -> Check {
    let spec = SimulationSpec { phase_max: 1.0, z_range: (2.0 * UM, 2.0 * UM), noise_sigma: 0.0, ..Default::default() };
    let sources = procedural_sources(6, 64, 64, PITCH, 11).unwrap();
    let set = simulate_dataset(&sources, &spec).unwrap();
    let (mut lo_ssim, mut hi_mae) = (f64::INFINITY, 0.0f64);
    for s in &set {
        let norm = normalize_channel_gains(&s.x).unwrap();
        let lambdas = [0, 1, 2].map(|c| {
            effective_wavelength(&SensorChannel::new(spec.channel_centers[c], s.sigma_c_used[c]).unwrap(), &spec.band)
        });
        let d = derivative_chromatic(&norm, lambdas, s.z, ChromaticMode::LeastSquares).unwrap();
        let i = mean_channel(&norm).unwrap();
        let phi = solve_tie_xi(&d, &i, default_tikhonov(&i), default_intensity_floor(&i)).unwrap();
        lo_ssim = lo_ssim.min(ms_ssim(&phi, &s.y.zero_mean(), 5).unwrap());
        hi_mae = hi_mae.max(mae(&phi, &s.y).unwrap());
    }
    check(
        lo_ssim > 0.8 && hi_mae < 0.1,
        format!("{} samples, min MS-SSIM {lo_ssim:.3} (> 0.8), max MAE {hi_mae:.4} rad (< 0.1)", set.len()),
    )
}

const TOY_DIM: usize = 8;
const TOY_SIGMA: f64 = 0.1;

/// Conditional Gaussian toy `Y | X ~ N(A X + b + offset, 0.1^2 I)`.
struct Toy {
    a: Vec<f64>,
    b: Vec<f64>,
    offset: f64,
}

impl Toy {
    fn new(seed: u64, offset: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..TOY_DIM * TOY_DIM).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let b = (0..TOY_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { a, b, offset }
    }

    fn mean(&self, x: &[f64]) -> Vec<f64> {
        (0..TOY_DIM)
            .map(|i| self.offset + self.b[i] + (0..TOY_DIM).map(|j| self.a[i * TOY_DIM + j] * x[j]).sum::<f64>())
            .collect()
    }

    fn pairs(&self, n: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..TOY_DIM).map(|_| rng.sample(StandardNormal)).collect();
                let y = self.mean(&x).iter().map(|m| m + TOY_SIGMA * rng.sample::<f64, _>(StandardNormal)).collect();
                TrainPair { x: Tensor::vector(x).unwrap(), y: Tensor::vector(y).unwrap() }
            })
            .collect()
    }
}

fn train_toy(toy: &Toy, centered: bool, steps: u64, timesteps: usize, seed: u64) -> DiffusionModel {
    let data = toy.pairs(2048, seed);
    let cfg = DiffusionConfig { centered, steps: timesteps, time_input: TimeInput::LogSnr, ..Default::default() };
    let mut model = DiffusionModel::vector(TOY_DIM, TOY_DIM, 64, 2, seed + 2, cfg).unwrap();
    let tc = TrainConfig { steps, batch_size: 32, optimizer: OptimizerConfig::adam(1e-3), seed: seed + 4 };
    let mut st = TrainState::new(&tc, &model);
    train(&data, &mut model, &mut st, &tc).unwrap();
    model
}

/// Per-coordinate sample mean and std of `n` draws at `x`.
fn sample_moments(model: &DiffusionModel, x: &Tensor, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let draws: Vec<Tensor> = (0..n)
        .into_par_iter()
        .map(|i| model.sample(x, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64))).unwrap())
        .collect();
    let mean: Vec<f64> = (0..TOY_DIM).map(|k| draws.iter().map(|d| d.data()[k]).sum::<f64>() / n as f64).collect();
    let std = (0..TOY_DIM)
        .map(|k| (draws.iter().map(|d| (d.data()[k] - mean[k]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    (mean, std)
}

fn rel_err(v: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = v.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

fn schedule_check(model: &DiffusionModel) -> Check {
    let x = Tensor::vector(vec![0.5; TOY_DIM]).unwrap();
    let g0 = model.schedule.gamma(0.0, &x).unwrap();
    let g1 = model.schedule.gamma(1.0, &x).unwrap();
    let n = 1000;
    let residual = (0..=n)
        .map(|i| {
            let v = model.schedule.eval(i as f64 / n as f64, &x).unwrap();
            (v.gamma_dt + v.beta * v.gamma).powi(2)
        })
        .sum::<f64>()
        / (n + 1) as f64;
    check(
        g0 > 0.99 && g1 < 0.01 && residual < 1e-3,
        format!("gamma(0) {g0:.4} (> 0.99), gamma(1) {g1:.4} (< 0.01), ODE residual {residual:.1e} (< 1e-3)"),
    )
}

fn zmd_toy_check(model: &DiffusionModel, toy: &Toy) -> Check {
    let x = vec![0.5; TOY_DIM];
    let truth = toy.mean(&x);
    let xt = Tensor::vector(x).unwrap();
    let (mean, std) = sample_moments(model, &xt, 10_000, 1000);
    let mean_err = rel_err(&mean, &truth);
    let std_err = std.iter().map(|s| (s / TOY_SIGMA - 1.0).abs()).fold(0.0, f64::max);
    // the mean predictor alone is deterministic, so its samples have zero spread
    let mp = qpi_core::diffusion::MeanPredictor::predict_mean(model, &xt).unwrap();
    let mp_mean_err = rel_err(mp.data(), &truth);
    let mp_std_err = 1.0;
    check(
        mean_err < 0.05 && std_err < 0.15 && std_err < mp_std_err,
        format!(
            "mean rel err {mean_err:.4} (< 0.05), worst std rel err {std_err:.3} (< 0.15); \
             mean predictor only: mean rel err {mp_mean_err:.4}, std rel err {mp_std_err:.0}"
        ),
    )
}

fn ablation() -> Check {
    let x = vec![0.5; TOY_DIM];
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let toy = Toy::new(100 + seed, 10.0);
        let truth = toy.mean(&x);
        let xt = Tensor::vector(x.clone()).unwrap();
        let errs: Vec<f64> = [true, false]
            .into_iter()
            .map(|centered| {
                let model = train_toy(&toy, centered, 2000, 200, 10 * seed);
                rel_err(&sample_moments(&model, &xt, 1000, 77).0, &truth)
            })
            .collect();
        if errs[0] < errs[1] {
            wins += 1;
        }
        rows.push(format!("{:.4}/{:.4}", errs[0], errs[1]));
    }
    check(wins >= 4, format!("ZMD beats uncentered in {wins}/5 seeds (>= 4); mean rel err ZMD/CVDM {}", rows.join(" ")))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

/// Worst relative error of parameter and input gradients of one layer stack.
fn layer_gradient_error(layers: Vec<LayerSpec>, in_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec { in_channels: in_shape[0], layers, init_seed: seed, zero_last: false };
    let mut net = Network::new(spec).unwrap();
    let p0: Vec<f64> = net.params().iter().map(|p| p + rng.gen_range(-0.3..0.3)).collect();
    net.set_params(&p0).unwrap();
    let x = random_tensor(in_shape, &mut rng);
    let (y, acts) = net.forward_cached(&x).unwrap();
    let w = random_tensor(y.shape(), &mut rng);
    let (gx, gp) = net.backward(&acts, &w).unwrap();
    let h = 1e-5;
    let mut fd = vec![0.0; p0.len()];
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += h;
        net.set_params(&p).unwrap();
        let up = dot(&w, &net.forward(&x).unwrap());
        p[i] -= 2.0 * h;
        net.set_params(&p).unwrap();
        fd[i] = (up - dot(&w, &net.forward(&x).unwrap())) / (2.0 * h);
    }
    net.set_params(&p0).unwrap();
    let mut fdx = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = dot(&w, &net.forward(&xp).unwrap());
        xp.data_mut()[i] -= 2.0 * h;
        fdx[i] = (up - dot(&w, &net.forward(&xp).unwrap())) / (2.0 * h);
    }
    let ep = if fd.is_empty() { 0.0 } else { vec_rel(&gp, &fd) };
    ep.max(vec_rel(gx.data(), &fdx))
}

/// Central differences of the model loss against `sample_loss_grad`. The
/// stop-gradient rules mean each parameter block sees a different part of
/// the loss: the mean network only `omega * L_mean`, the schedule the noise
/// term only when configured to.
fn loss_gradient_error(mut model: DiffusionModel, pair: &TrainPair, draw: &Draw) -> f64 {
    let (_, grad) = model.sample_loss_grad(pair, draw).unwrap();
    let p0 = model.params();
    let nn = model.noise_net.num_params();
    let nm = model.mean_net.num_params();
    let ns = model.schedule.num_params();
    let part = |m: &DiffusionModel, i: usize| {
        let t = m.sample_loss_grad(pair, draw).unwrap().0;
        let w = m.config.omega;
        if (nn..nn + nm).contains(&i) {
            w * t.mean
        } else if (nn + nm..nn + nm + ns).contains(&i) && !m.config.noise_trains_schedule {
            t.total - t.noise - w * t.mean
        } else {
            t.total - w * t.mean
        }
    };
    let h = 1e-6;
    let mut fd = vec![0.0; p0.len()];
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += h;
        model.set_params(&p).unwrap();
        let up = part(&model, i);
        p[i] -= 2.0 * h;
        model.set_params(&p).unwrap();
        fd[i] = (up - part(&model, i)) / (2.0 * h);
    }
    vec_rel(&grad, &fd)
}

fn gradient_checks() -> Check {
    let layer_cases: Vec<(&str, Vec<LayerSpec>, Vec<usize>)> = vec![
        ("conv3", vec![LayerSpec::Conv { out: 3, kernel: 3 }], vec![2, 5, 6]),
        ("conv5", vec![LayerSpec::Conv { out: 2, kernel: 5 }], vec![3, 4, 4]),
        ("pointwise", vec![LayerSpec::Pointwise { out: 4 }], vec![3, 4, 5]),
        ("silu", vec![LayerSpec::Silu], vec![2, 3, 3]),
        (
            "residual",
            vec![LayerSpec::Residual { body: vec![LayerSpec::Conv { out: 2, kernel: 3 }, LayerSpec::Silu] }],
            vec![2, 4, 4],
        ),
        ("avgpool", vec![LayerSpec::AvgPool { factor: 2 }], vec![2, 4, 6]),
        ("upsample", vec![LayerSpec::Upsample { factor: 2 }], vec![2, 3, 3]),
    ];
    let layer_worst = layer_cases
        .into_iter()
        .enumerate()
        .map(|(i, (_, l, s))| layer_gradient_error(l, &s, i as u64))
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut loss_worst = 0.0f64;
    let configs = [
        (true, true, false, TimeInput::Time),
        (true, false, true, TimeInput::Time),
        (true, true, true, TimeInput::Time),
        (true, true, false, TimeInput::LogSnr),
        (false, true, false, TimeInput::Time),
    ];
    for (i, (centered, linear_skip, noise_trains_schedule, time_input)) in configs.into_iter().enumerate() {
        let cfg = DiffusionConfig { centered, linear_skip, noise_trains_schedule, time_input, ..Default::default() };
        let mut model = DiffusionModel::vector(2, 3, 6, 1, i as u64, cfg).unwrap();
        let p: Vec<f64> = model.params().iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
        model.set_params(&p).unwrap();
        let pair = TrainPair { x: random_tensor(&[2, 1, 1], &mut rng), y: random_tensor(&[3, 1, 1], &mut rng) };
        let draw = Draw { t: 0.2 + 0.15 * i as f64, eps: gaussian(&[3, 1, 1], &mut rng) };
        loss_worst = loss_worst.max(loss_gradient_error(model, &pair, &draw));
    }
    let cfg = DiffusionConfig { noise_trains_schedule: true, ..Default::default() };
    let mut model = DiffusionModel::image(2, 1, 3, 5, cfg).unwrap();
    let p: Vec<f64> = model.params().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
    model.set_params(&p).unwrap();
    let pair = TrainPair { x: random_tensor(&[2, 4, 4], &mut rng), y: random_tensor(&[1, 4, 4], &mut rng) };
    let draw = Draw { t: 0.6, eps: gaussian(&[1, 4, 4], &mut rng) };
    loss_worst = loss_worst.max(loss_gradient_error(model, &pair, &draw));

    check(
        layer_worst < 1e-6 && loss_worst < 1e-4,
        format!("worst layer rel err {layer_worst:.1e} (< 1e-6), worst loss rel err {loss_worst:.1e} (< 1e-4)"),
    )
}

/// Direct MS-SSIM: explicit window sums at every valid position.
fn reference_ms_ssim(a: &RealImage, b: &RealImage, levels: usize) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let rows = |m: &RealImage| -> Vec<Vec<f64>> { m.data().rows().into_iter().map(|r| r.to_vec()).collect() };
    let (a, b) = (rows(a), rows(b));
    let lo = a.iter().chain(&b).flatten().copied().fold(f64::INFINITY, f64::min);
    let mut x: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v - lo).collect()).collect();
    let mut y: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|v| v - lo).collect()).collect();
    let range = x.iter().chain(&y).flatten().copied().fold(0.0, f64::max);
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let mut g = [[0.0; 11]; 11];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let wsum: f64 = weights[..levels].iter().sum();
    let mut score = 1.0;
    for level in 0..levels {
        let (h, w) = (x.len(), x[0].len());
        let (mut ssim, mut cs, mut n) = (0.0, 0.0, 0.0);
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / gs;
                        let (p, q) = (x[r + i][c + j], y[r + i][c + j]);
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let s = (2.0 * (xy - mx * my) + c2) / (xx - mx * mx + yy - my * my + c2);
                cs += s;
                ssim += s * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                n += 1.0;
            }
        }
        let term = if level + 1 == levels { ssim / n } else { cs / n };
        score *= f64::max(term, 0.0).powf(weights[level] / wsum);
        let half = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..m.len() / 2)
                .map(|r| {
                    (0..m[0].len() / 2)
                        .map(|c| {
                            (m[2 * r][2 * c] + m[2 * r + 1][2 * c] + m[2 * r][2 * c + 1] + m[2 * r + 1][2 * c + 1])
                                / 4.0
                        })
                        .collect()
                })
                .collect()
        };
        x = half(&x);
        y = half(&y);
    }
    score.clamp(0.0, 1.0)
}

fn metrics_sanity() -> Check {
    let sources = procedural_sources(20, 64, 64, PITCH, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst_ref = 0.0f64;
    let mut worst_self = 0.0f64;
    let mut worst_shift = 0.0f64;
    for src in &sources {
        let noisy = RealImage::new(src.data().mapv(|v| v + 0.2 * (rng.gen::<f64>() - 0.5)), PITCH).unwrap();
        let ours = ms_ssim(src, &noisy, 3).unwrap();
        worst_ref = worst_ref.max((ours - reference_ms_ssim(src, &noisy, 3)).abs());
        worst_self = worst_self.max((ms_ssim(src, src, 5).unwrap() - 1.0).abs());
        let c: f64 = rng.gen_range(-3.0..3.0);
        worst_shift = worst_shift.max(mae(src, &src.map(|v| v + c)).unwrap());
    }
    check(
        worst_ref < 1e-6 && worst_self == 0.0 && worst_shift < 1e-12,
        format!(
            "|ms_ssim(a,a) - 1| {worst_self:.1e}, max mae(a, a+c) {worst_shift:.1e}, \
             20 pairs vs reference {worst_ref:.1e} (< 1e-6)"
        ),
    )
}

fn qpi(threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qpi"))
        .args(args)
        .env("QPI_THREADS", threads.to_string())
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("qpi {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_reproducibility() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let config = "seed = 3\n\
        [simulate]\ncount = 4\nwidth = 32\nheight = 32\nphase_max = 1.0\n\
        [diffusion]\nwidth = 4\ntimesteps = 10\ntrain_steps = 8\nbatch_size = 2\nsamples_per_input = 2\n\
        [theory]\nrates = [1.0]\nsteps = 200\npaths = 2000\ndim = 2\ndatasets = 2\n";
    std::fs::write(d("run.toml"), config).unwrap();
    let planes = {
        let t = qpi_core::io::StoredTensor::new(
            vec![2, 16, 16],
            qpi_core::io::TensorData::F64((0..512).map(|i| 1.0 + 0.01 * ((i * 7 % 13) as f64)).collect()),
        )
        .unwrap();
        qpi_core::io::write_tensor(d("planes.zmdt"), &t).unwrap();
        d("planes.zmdt")
    };
    let cfg = d("run.toml");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["simulate".into()]),
        ("solve", vec!["solve".into(), "--input".into(), d("simulate/dataset.zmds")]),
        ("solve-stack", vec!["solve".into(), "--method".into(), "teague".into(), "--input".into(), planes]),
        ("train", vec!["train".into(), "--data".into(), d("simulate/dataset.zmds")]),
        (
            "sample",
            vec![
                "sample".into(),
                "--checkpoint".into(),
                d("train/model.ckpt"),
                "--data".into(),
                d("simulate/dataset.zmds"),
            ],
        ),
        ("eval", vec!["eval".into(), "--pred".into(), d("solve"), "--truth".into(), d("simulate/dataset.zmds")]),
        ("verify-theory", vec!["verify-theory".into()]),
    ];
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get().max(2));
    for (name, mut args) in steps {
        args.extend(["--config".into(), cfg.clone(), "--out".into(), d(name)]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if let Err(e) = qpi(1, &args) {
            return check(false, e);
        }
        let manifest = Path::new(&d(name)).join("manifest.json");
        let replay_out = d(&format!("{name}-replay"));
        if let Err(e) = qpi(threads, &["replay", manifest.to_str().unwrap(), "--out", &replay_out]) {
            return check(false, e);
        }
        let a = std::fs::read(&manifest).unwrap();
        let b = std::fs::read(Path::new(&replay_out).join("manifest.json")).unwrap();
        if a != b {
            return check(false, format!("{name}: replayed manifest differs"));
        }
    }
    check(true, format!("7 runs at 1 thread replayed from manifests at {threads} threads with identical output hashes"))
}

fn main() {
    let mut ok = true;
    ok &= run("optics unitarity", Some(Duration::from_secs(10)), optics_unitarity);
    ok &= run("TIE round trip (weak phase)", Some(Duration::from_secs(5)), tie_round_trip);
    ok &= run("chromatic single-exposure round trip", Some(Duration::from_secs(10)), chromatic_round_trip);
    ok &= run("gradient correctness", None, gradient_checks);

    let mut theory = None;
    ok &= run("mean decay and centered moments (Monte Carlo)", Some(Duration::from_secs(60)), || {
        let r = verify_all(&TheoryConfig::default()).unwrap();
        let worst_lemma = r.lemma_mean.iter().flat_map(|l| &l.points).map(|p| p.error).fold(0.0, f64::max);
        let c = check(
            r.lemma_mean.iter().all(|l| l.passed) && r.centered_process.iter().all(|c| c.passed),
            format!(
                "b in {{0.5, 2, 10}}, 1e4 paths: worst mean rel err {worst_lemma:.4} (< 0.02), centered moments within 3 SE: {}",
                r.centered_process.iter().all(|c| c.passed)
            ),
        );
        theory = Some(r);
        c
    });
    ok &= run("moment identity", None, || {
        let r = theory.as_ref().expect("theory run");
        let worst = r.moment_identity.iter().map(|m| m.rel_error).fold(0.0, f64::max);
        check(
            r.moment_identity.len() == 10 && r.moment_identity.iter().all(|m| m.passed),
            format!("{} datasets, worst rel err {worst:.1e} (< 1e-10)", r.moment_identity.len()),
        )
    });

    let toy = Toy::new(1, 0.0);
    let mut model = None;
    let t0 = Instant::now();
    ok &= run("schedule training", Some(Duration::from_secs(300)), || {
        let m = train_toy(&toy, true, 20_000, 1000, 1);
        let c = schedule_check(&m);
        model = Some(m);
        c
    });
    // the toy's budget covers the shared training run as well as sampling
    let left = Duration::from_secs(900).saturating_sub(t0.elapsed());
    ok &= run("ZMD end-to-end toy", Some(left), || zmd_toy_check(model.as_ref().unwrap(), &toy));
    ok &= run("ZMD vs CVDM ablation", None, ablation);
    ok &= run("metrics sanity", None, metrics_sanity);
    ok &= run("CLI reproducibility", None, cli_reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
