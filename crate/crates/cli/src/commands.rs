//! Subcommand implementations. Every command reads only its config and the
//! files listed as inputs, and writes only into the output directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use qpi_core::dataset::{procedural_sources, read_dataset, sample_seed, simulate_dataset, write_dataset, Sample};
use qpi_core::diffusion::{load_checkpoint, save_checkpoint, train, DiffusionModel, TrainPair, TrainState};
use qpi_core::metrics::MetricReport;
use qpi_core::nn::Tensor;
use qpi_core::optics::{effective_wavelength, SensorChannel};
use qpi_core::theory::verify_all;
use qpi_core::tie::{
    derivative_2shot, derivative_chromatic, derivative_polyfit, mean_channel, normalize_channel_gains,
    solve_pure_phase, solve_teague, solve_tie_xi, teague_diagnostic, ChromaticMode, SpectralGrid, TeagueDiagnostic,
};
use qpi_core::{PhaseMap, RealImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Method, RunConfig, SolveConfig};
use crate::error::CliError;
use crate::files::{
    has_extension, load_phase_maps, load_planes, write_f32_tensor, write_f64_tensor, write_png16, PngScale,
};
use crate::manifest::{sha256_file, FileRecord, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Solve,
    Train,
    Sample,
    Eval,
    VerifyTheory,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Solve => "solve",
            CommandKind::Train => "train",
            CommandKind::Sample => "sample",
            CommandKind::Eval => "eval",
            CommandKind::VerifyTheory => "verify-theory",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::Simulate, Self::Solve, Self::Train, Self::Sample, Self::Eval, Self::VerifyTheory]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

/// A fully resolved command: config with overrides applied and named input
/// files.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: CommandKind,
    pub config: RunConfig,
    pub inputs: Vec<(String, PathBuf)>,
    pub out: PathBuf,
}

impl Invocation {
    fn all(&self, role: &str) -> Vec<&Path> {
        self.inputs.iter().filter(|(r, _)| r == role).map(|(_, p)| p.as_path()).collect()
    }

    fn one(&self, role: &str) -> Result<&Path, CliError> {
        match self.all(role).as_slice() {
            [p] => Ok(p),
            _ => Err(CliError::usage(format!("{} needs exactly one `{role}` input", self.command.name()))),
        }
    }

    fn optional(&self, role: &str) -> Option<&Path> {
        self.all(role).first().copied()
    }
}

/// Execute `inv`, write its manifest and return it.
pub fn run(inv: &Invocation) -> Result<Manifest, CliError> {
    std::fs::create_dir_all(&inv.out)?;
    let inputs = inv
        .inputs
        .iter()
        .map(|(role, p)| Ok(FileRecord { role: role.clone(), path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect::<Result<Vec<_>, CliError>>()?;
    let cfg = &inv.config;
    let out = inv.out.as_path();
    let mut names = match inv.command {
        CommandKind::Simulate => simulate(cfg, &inv.all("source"), out)?,
        CommandKind::Solve => solve(cfg, &inv.all("input"), out)?,
        CommandKind::Train => train_cmd(cfg, inv.one("data")?, inv.optional("resume"), out)?,
        CommandKind::Sample => sample_cmd(cfg, inv.one("checkpoint")?, inv.one("data")?, out)?,
        CommandKind::Eval => eval_cmd(cfg, inv.one("pred")?, inv.one("truth")?, out)?,
        CommandKind::VerifyTheory => verify_theory(cfg, out)?,
    };
    names.sort();
    let outputs = names
        .into_iter()
        .map(|name| Ok(FileRecord { role: String::new(), sha256: sha256_file(&out.join(&name))?, path: name }))
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = Manifest {
        tool: "qpi".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: inv.command.name().into(),
        seed: cfg.seed,
        config_sha256: cfg.sha256(),
        config: cfg.to_toml(),
        inputs,
        outputs,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Rerun the command recorded in a manifest into `out` and check that every
/// output hash matches.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<Manifest, CliError> {
    let m = Manifest::read(manifest_path)?;
    let command = CommandKind::from_name(&m.command)
        .ok_or_else(|| CliError::usage(format!("manifest names unknown command {:?}", m.command)))?;
    if m.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by qpi {}, replaying with {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    let config = RunConfig::from_toml(&m.config)?;
    if config.sha256() != m.config_sha256 {
        return Err(CliError::usage("manifest config does not match its recorded hash"));
    }
    let mut inputs = Vec::new();
    for rec in &m.inputs {
        let path = PathBuf::from(&rec.path);
        if sha256_file(&path)? != rec.sha256 {
            return Err(CliError::usage(format!("input {} changed since the manifest was written", rec.path)));
        }
        inputs.push((rec.role.clone(), path));
    }
    let fresh = run(&Invocation { command, config, inputs, out: out.to_path_buf() })?;
    if fresh.outputs != m.outputs {
        let differing: Vec<&str> =
            m.outputs.iter().filter(|o| !fresh.outputs.contains(o)).map(|o| o.path.as_str()).collect();
        return Err(CliError::Internal(format!("replay outputs differ from the manifest: {differing:?}")));
    }
    Ok(fresh)
}

fn simulate(cfg: &RunConfig, sources: &[&Path], out: &Path) -> Result<Vec<String>, CliError> {
    let s = &cfg.simulate;
    let spec = s.to_spec(cfg.seed)?;
    let pitch = s.pitch.meters();
    let images = if s.source_dir.is_some() {
        sources
            .iter()
            .map(|p| Ok(qpi_core::dataset::load_grayscale(p, pitch)?))
            .collect::<Result<Vec<_>, CliError>>()?
    } else {
        procedural_sources(s.count, s.width, s.height, pitch, cfg.seed)?
    };
    let set = simulate_dataset(&images, &spec)?;
    write_dataset(&set, out.join("dataset.zmds"))?;
    log::info!("simulated {} samples", set.len());
    Ok(vec!["dataset.zmds".into()])
}

/// Image files in `dir` that `simulate` uses as sources, in order.
pub fn source_files(dir: &Path, count: usize) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| ["png", "pgm", "pnm", "ppm"].iter().any(|ext| has_extension(p, ext)))
        .collect();
    files.sort();
    files.truncate(count);
    Ok(files)
}

fn tikhonov(sv: &SolveConfig, img: &RealImage) -> f64 {
    sv.tikhonov_factor * SpectralGrid::for_image(img).mean_laplacian_symbol()
}

fn solve_chromatic(
    channels: &[RealImage; 3],
    lambdas: [f64; 3],
    z: f64,
    sv: &SolveConfig,
) -> Result<PhaseMap, CliError> {
    let ch = if sv.normalize_gains { normalize_channel_gains(channels)? } else { channels.clone() };
    let mode = if sv.two_point { ChromaticMode::TwoPoint } else { ChromaticMode::LeastSquares };
    let d = derivative_chromatic(&ch, lambdas, z, mode)?;
    let i = mean_channel(&ch)?;
    Ok(solve_tie_xi(&d, &i, tikhonov(sv, &i), sv.floor_fraction * i.max())?)
}

fn solve_stack(
    planes: &[RealImage],
    method: Method,
    sv: &SolveConfig,
) -> Result<(PhaseMap, Option<TeagueDiagnostic>), CliError> {
    let zs: Vec<f64> = sv.planes.iter().map(|z| z.meters()).collect();
    if planes.len() != zs.len() {
        return Err(CliError::usage(format!(
            "got {} image planes but [solve] planes lists {} defocus values",
            planes.len(),
            zs.len()
        )));
    }
    let deriv = if zs.len() == 2 && zs[0] == -zs[1] && zs[0] != 0.0 {
        let (plus, minus) = if zs[1] > 0.0 { (1, 0) } else { (0, 1) };
        derivative_2shot(&planes[plus], &planes[minus], zs[plus])?
    } else {
        derivative_polyfit(planes, &zs, sv.degree)?
    };
    let focus = match zs.iter().position(|&z| z == 0.0) {
        Some(i) => planes[i].clone(),
        None => {
            let mut acc = planes[0].data().clone();
            for p in &planes[1..] {
                p.check_same_grid(&planes[0])?;
                acc += p.data();
            }
            RealImage::new(acc / planes.len() as f64, planes[0].pitch())?
        }
    };
    let k = 2.0 * PI / sv.wavelength.meters();
    let eps = tikhonov(sv, &focus);
    match method {
        Method::PurePhase => Ok((solve_pure_phase(&deriv, focus.mean(), k, eps)?, None)),
        Method::Teague => {
            let floor = sv.floor_fraction * focus.max();
            let phi = solve_teague(&deriv, &focus, k, eps, floor)?;
            let diag = teague_diagnostic(&deriv, &focus, &phi, k, eps, floor)?;
            Ok((phi, Some(diag)))
        }
        Method::Chromatic => unreachable!("handled by the caller"),
    }
}

#[derive(Serialize)]
struct PhaseSidecar<'a> {
    method: Method,
    shape: [usize; 2],
    pitch_m: f64,
    tensor: &'a str,
    png: PngScale,
    #[serde(skip_serializing_if = "Option::is_none")]
    teague: Option<TeagueDiagnostic>,
}

fn dataset_lambdas(cfg: &RunConfig, s: &Sample) -> Result<[f64; 3], CliError> {
    let band = cfg.simulate.band()?;
    let mut out = [0.0; 3];
    for ((o, center), &sigma) in out.iter_mut().zip(&cfg.simulate.channel_centers).zip(&s.sigma_c_used) {
        *o = effective_wavelength(&SensorChannel::new(center.meters(), sigma)?, &band);
    }
    Ok(out)
}

fn solve(cfg: &RunConfig, inputs: &[&Path], out: &Path) -> Result<Vec<String>, CliError> {
    let sv = &cfg.solve;
    if inputs.is_empty() {
        return Err(CliError::usage("solve needs at least one --input"));
    }
    let results: Vec<(PhaseMap, Option<TeagueDiagnostic>)> = if inputs.iter().any(|p| has_extension(p, "zmds")) {
        if inputs.len() != 1 {
            return Err(CliError::usage("a dataset must be the only solve input"));
        }
        if sv.method != Method::Chromatic {
            return Err(CliError::usage("dataset inputs are single RGB exposures; use --method chromatic"));
        }
        let set = read_dataset(inputs[0])?;
        set.par_iter()
            .map(|s| Ok((solve_chromatic(&s.x, dataset_lambdas(cfg, s)?, s.z, sv)?, None)))
            .collect::<Result<_, CliError>>()?
    } else {
        let mut planes = Vec::new();
        for p in inputs {
            planes.extend(load_planes(p, sv.pitch.meters())?);
        }
        match sv.method {
            Method::Chromatic => {
                let channels: [RealImage; 3] = planes.try_into().map_err(|p: Vec<_>| {
                    CliError::usage(format!("chromatic solve needs 3 channels, got {}", p.len()))
                })?;
                let band = cfg.simulate.band()?;
                let mut lambdas = [0.0; 3];
                for (l, center) in lambdas.iter_mut().zip(&cfg.simulate.channel_centers) {
                    *l = effective_wavelength(&SensorChannel::new(center.meters(), sv.sigma_c.meters())?, &band);
                }
                vec![(solve_chromatic(&channels, lambdas, sv.z.meters(), sv)?, None)]
            }
            m => vec![solve_stack(&planes, m, sv)?],
        }
    };
    let mut names = Vec::new();
    for (i, (phi, teague)) in results.into_iter().enumerate() {
        let stem = format!("phase_{i:04}");
        let tensor = format!("{stem}.zmdt");
        write_f32_tensor(&out.join(&tensor), vec![phi.height(), phi.width()], phi.data().iter().copied())?;
        let png = write_png16(&out.join(format!("{stem}.png")), &phi)?;
        let side = PhaseSidecar {
            method: sv.method,
            shape: [phi.height(), phi.width()],
            pitch_m: phi.pitch(),
            tensor: &tensor,
            png,
            teague,
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(out.join(format!("{stem}.json")), json + "\n")?;
        names.extend([tensor, format!("{stem}.png"), format!("{stem}.json")]);
    }
    Ok(names)
}

/// Training pairs from a dataset: X is each channel divided by its mean,
/// minus one; Y is the phase in radians.
pub fn training_pairs(set: &[Sample]) -> Result<Vec<TrainPair>, CliError> {
    set.iter()
        .map(|s| {
            let ch = normalize_channel_gains(&s.x)?;
            let (h, w) = (s.y.height(), s.y.width());
            let x: Vec<f64> = ch.iter().flat_map(|c| c.data().iter().map(|v| v - 1.0)).collect();
            let y: Vec<f64> = s.y.data().iter().copied().collect();
            Ok(TrainPair { x: Tensor::new(vec![3, h, w], x)?, y: Tensor::new(vec![1, h, w], y)? })
        })
        .collect()
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    noise: f64,
    beta: f64,
    gamma: f64,
    prior: f64,
    mean: f64,
    total: f64,
}

fn train_cmd(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<Vec<String>, CliError> {
    let set = read_dataset(data)?;
    if set.is_empty() {
        return Err(CliError::usage("training dataset is empty"));
    }
    let pairs = training_pairs(&set)?;
    let tc = cfg.diffusion.train_config(cfg.seed);
    let (mut model, mut state) = match resume {
        Some(p) => {
            let (m, st) = load_checkpoint(p)?;
            let st = st.ok_or_else(|| CliError::usage("checkpoint holds no training state to resume"))?;
            if m.config != cfg.diffusion.model_config() {
                return Err(CliError::usage("checkpoint was trained with a different [diffusion] configuration"));
            }
            if st.seed != cfg.seed {
                return Err(CliError::usage(format!("checkpoint was trained with seed {}, not {}", st.seed, cfg.seed)));
            }
            (m, st)
        }
        None => {
            let m = DiffusionModel::image(3, 1, cfg.diffusion.width, cfg.seed, cfg.diffusion.model_config())?;
            let st = TrainState::new(&tc, &m);
            (m, st)
        }
    };
    let start = state.step;
    let trace = match train(&pairs, &mut model, &mut state, &tc) {
        Ok(t) => t,
        Err(qpi_core::Error::NonFiniteLoss { step, last_good }) => {
            save_checkpoint(out.join("last_good.ckpt"), &last_good, None)?;
            return Err(CliError::Internal(format!(
                "non-finite loss at step {step}; last good model in last_good.ckpt"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(out.join("model.ckpt"), &model, Some(&state))?;
    let mut w = csv::Writer::from_path(out.join("loss.csv")).map_err(|e| CliError::usage(e.to_string()))?;
    for (i, t) in trace.iter().enumerate() {
        let row = LossRow {
            step: start + i as u64,
            noise: t.noise,
            beta: t.beta,
            gamma: t.gamma,
            prior: t.prior,
            mean: t.mean,
            total: t.total,
        };
        w.serialize(row).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.flush()?;
    Ok(vec!["loss.csv".into(), "model.ckpt".into()])
}

fn sample_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let pairs = training_pairs(&read_dataset(data)?)?;
    let draws = cfg.diffusion.samples_per_input;
    if draws == 0 {
        return Err(CliError::usage("samples_per_input must be at least 1"));
    }
    let per_input: Vec<Vec<f64>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut v = Vec::with_capacity(draws * p.y.len());
            for j in 0..draws {
                let seed = sample_seed(sample_seed(cfg.seed, i as u64), j as u64);
                let y = model.sample(&p.x, &mut ChaCha8Rng::seed_from_u64(seed))?;
                v.extend_from_slice(y.data());
            }
            Ok(v)
        })
        .collect::<Result<_, CliError>>()?;
    let (h, w) = pairs.first().map_or((0, 0), |p| (p.y.shape()[1], p.y.shape()[2]));
    write_f64_tensor(&out.join("samples.zmdt"), vec![pairs.len(), draws, h, w], per_input.concat())?;
    Ok(vec!["samples.zmdt".into()])
}

#[derive(Serialize)]
struct EvalSummary {
    count: usize,
    levels: usize,
    ms_ssim_mean: f64,
    ms_ssim_std: f64,
    mae_mean: f64,
    mae_std: f64,
}

fn eval_cmd(cfg: &RunConfig, pred: &Path, truth: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let unit_pitch = |v: Vec<PhaseMap>| -> Result<Vec<PhaseMap>, CliError> {
        v.into_iter().map(|m| Ok(RealImage::new(m.into_data(), 1.0)?)).collect()
    };
    let pred = unit_pitch(load_phase_maps(pred)?)?;
    let truth = unit_pitch(load_phase_maps(truth)?)?;
    if pred.len() != truth.len() {
        return Err(CliError::usage(format!("{} predictions but {} ground-truth maps", pred.len(), truth.len())));
    }
    let pairs: Vec<(PhaseMap, PhaseMap)> = pred.into_iter().zip(truth).collect();
    let report = MetricReport::evaluate(&pairs, cfg.eval.levels)?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv")).map_err(|e| CliError::usage(e.to_string()))?;
    for row in &report.per_sample {
        w.serialize(row).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.flush()?;
    let summary = EvalSummary {
        count: pairs.len(),
        levels: cfg.eval.levels,
        ms_ssim_mean: report.ms_ssim_mean,
        ms_ssim_std: report.ms_ssim_std,
        mae_mean: report.mae_mean,
        mae_std: report.mae_std,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(out.join("summary.json"), json + "\n")?;
    Ok(vec!["metrics.csv".into(), "summary.json".into()])
}

fn verify_theory(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let report = verify_all(&cfg.theory.to_config(cfg.seed))?;
    if !report.passed {
        log::warn!("theory checks failed; see report.json");
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(out.join("report.json"), json + "\n")?;
    Ok(vec!["report.json".into()])
}
