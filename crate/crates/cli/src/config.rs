//! Run configuration: one TOML document holding every tunable.
//!
//! Every section and field may be omitted; omitted values take the defaults
//! listed in the field docs. Unknown keys are rejected and lengths must carry
//! a unit suffix.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use qpi_core::dataset::SimulationSpec;
use qpi_core::diffusion::{DiffusionConfig, TimeInput, TrainConfig};
use qpi_core::nn::OptimizerConfig;
use qpi_core::optics::WavelengthGrid;
use qpi_core::theory::TheoryConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::units::Length;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every random stream. Default 0; `--seed` overrides.
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub solve: SolveConfig,
    pub diffusion: DiffusionSection,
    pub eval: EvalConfig,
    pub theory: TheorySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Number of samples. Default 100.
    pub count: usize,
    /// Procedural source size in pixels. Default 64 x 64.
    pub width: usize,
    pub height: usize,
    /// Pixel pitch. Default "0.5um".
    pub pitch: Length,
    /// Directory of grayscale images used as sources (sorted by file name,
    /// first `count` taken). Procedural sources when absent.
    pub source_dir: Option<PathBuf>,
    /// Phase range upper end in radians. Default 3.5.
    pub phase_max: f64,
    /// Defocus range. Default "0.1um" to "3um".
    pub z_min: Length,
    pub z_max: Length,
    /// One defocus for the whole run. Default false.
    pub z_per_run: bool,
    /// Illumination band, left endpoints of `band_step` intervals. Default
    /// "400nm" to "700nm" in "6nm" steps.
    pub band_start: Length,
    pub band_end: Length,
    pub band_step: Length,
    /// Sensor channel centers, red, green, blue. Default 630, 550, 450 nm.
    pub channel_centers: [Length; 3],
    /// Channel width range. Default "10nm" to "100nm".
    pub sigma_c_min: Length,
    pub sigma_c_max: Length,
    /// Noise std as a fraction of mean intensity. Default 0.01.
    pub noise_sigma: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            count: 100,
            width: 64,
            height: 64,
            pitch: Length::um(0.5),
            source_dir: None,
            phase_max: 3.5,
            z_min: Length::um(0.1),
            z_max: Length::um(3.0),
            z_per_run: false,
            band_start: Length::nm(400.0),
            band_end: Length::nm(700.0),
            band_step: Length::nm(6.0),
            channel_centers: [Length::nm(630.0), Length::nm(550.0), Length::nm(450.0)],
            sigma_c_min: Length::nm(10.0),
            sigma_c_max: Length::nm(100.0),
            noise_sigma: 0.01,
        }
    }
}

impl SimulateConfig {
    pub fn band(&self) -> Result<WavelengthGrid, CliError> {
        Ok(WavelengthGrid::band(self.band_start.meters(), self.band_end.meters(), self.band_step.meters())?)
    }

    pub fn to_spec(&self, seed: u64) -> Result<SimulationSpec, CliError> {
        let spec = SimulationSpec {
            phase_max: self.phase_max,
            z_range: (self.z_min.meters(), self.z_max.meters()),
            z_per_run: self.z_per_run,
            band: self.band()?,
            channel_centers: self.channel_centers.map(Length::meters),
            sigma_c_range: (self.sigma_c_min.meters(), self.sigma_c_max.meters()),
            noise_sigma: self.noise_sigma,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Phase retrieval method for `solve`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    /// Uniform-intensity solver on a through-focus stack.
    PurePhase,
    /// Teague's two-Poisson solver on a through-focus stack.
    Teague,
    /// Single RGB exposure, derivative across colour channels.
    Chromatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    /// Default "chromatic"; `--method` overrides.
    pub method: Method,
    /// Tikhonov term as a multiple of the mean Laplacian symbol. Default 1e-3.
    pub tikhonov_factor: f64,
    /// Intensity floor as a fraction of max intensity. Default 1e-3.
    pub floor_fraction: f64,
    /// Polynomial degree for stacks of more than two planes. Default 2.
    pub degree: usize,
    /// Defocus of each stack plane, in input order. Default "-0.5um",
    /// "0.5um".
    pub planes: Vec<Length>,
    /// Illumination wavelength for stack methods. Default "550nm".
    pub wavelength: Length,
    /// Defocus of an RGB exposure. Default "2um". Dataset inputs carry their
    /// own.
    pub z: Length,
    /// Channel width assumed for RGB exposures when computing effective
    /// wavelengths. Default "50nm". Dataset inputs carry their own.
    pub sigma_c: Length,
    /// Use only the red and blue channels. Default false.
    pub two_point: bool,
    /// Divide each channel by its mean before differentiating. Default true.
    pub normalize_gains: bool,
    /// Pitch of image inputs. Default "0.5um".
    pub pitch: Length,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            method: Method::Chromatic,
            tikhonov_factor: 1e-3,
            floor_fraction: 1e-3,
            degree: 2,
            planes: vec![Length::um(-0.5), Length::um(0.5)],
            wavelength: Length::nm(550.0),
            z: Length::um(2.0),
            sigma_c: Length::nm(50.0),
            two_point: false,
            normalize_gains: true,
            pitch: Length::um(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Sampler steps T. Default 200.
    pub timesteps: usize,
    /// Curvature loss weight. Default 1e-3.
    pub a: f64,
    /// Mean loss weight. Default 2.
    pub omega: f64,
    /// Zero-mean diffusion on residuals. Default true.
    pub centered: bool,
    /// Learned linear denoiser added to the noise network. Default true.
    pub linear_skip: bool,
    /// Let the noise loss train the schedule. Default false.
    pub noise_trains_schedule: bool,
    /// Time channel encoding, "time" or "log_snr". Default "time".
    pub time_input: TimeInput,
    /// Hidden channels of both networks. Default 32.
    pub width: usize,
    /// Training step budget. Default 1000.
    pub train_steps: u64,
    /// Default 16.
    pub batch_size: usize,
    /// Adam learning rate. Default 1e-3.
    pub lr: f64,
    /// Samples drawn per conditioning input. Default 1.
    pub samples_per_input: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            timesteps: 200,
            a: 1e-3,
            omega: 2.0,
            centered: true,
            linear_skip: true,
            noise_trains_schedule: false,
            time_input: TimeInput::Time,
            width: 32,
            train_steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            samples_per_input: 1,
        }
    }
}

impl DiffusionSection {
    pub fn model_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            steps: self.timesteps,
            a: self.a,
            omega: self.omega,
            centered: self.centered,
            noise_trains_schedule: self.noise_trains_schedule,
            time_input: self.time_input,
            linear_skip: self.linear_skip,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig::adam(self.lr),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Requested MS-SSIM scales, reduced for small images. Default 5.
    pub levels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { levels: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    /// Constant rates b. Default 0.5, 2, 10.
    pub rates: Vec<f64>,
    /// Check times. Default 0.25, 0.5, 1.
    pub times: Vec<f64>,
    /// Euler-Maruyama steps on [0, 1]. Default 1000.
    pub steps: usize,
    /// Monte Carlo paths. Default 10000.
    pub paths: usize,
    /// Dimension of the process. Default 4.
    pub dim: usize,
    /// Random datasets for the moment identity. Default 10.
    pub datasets: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        let d = TheoryConfig::default();
        Self { rates: d.rates, times: d.times, steps: d.steps, paths: d.paths, dim: d.dim, datasets: d.datasets }
    }
}

impl TheorySection {
    pub fn to_config(&self, seed: u64) -> TheoryConfig {
        TheoryConfig {
            rates: self.rates.clone(),
            times: self.times.clone(),
            steps: self.steps,
            paths: self.paths,
            dim: self.dim,
            datasets: self.datasets,
            seed,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML text; the config hash is taken over these bytes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
