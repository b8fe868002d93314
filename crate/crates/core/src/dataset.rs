//! Synthetic polychromatic acquisitions of pure-phase objects.
//!
//! Pipeline per sample: grayscale image -> phase in `[0, phase_max]` ->
//! transmittance `e^{i phi}` -> defocus `z` -> three sensor channels with
//! randomly drawn widths -> additive white Gaussian noise.
//!
//! Every sample owns a ChaCha stream seeded from `(seed, index)`, so parallel
//! and serial generation produce bit-identical datasets.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, PhaseMap, RealImage};
use crate::optics::{polychromatic_channels, SensorChannel, WavelengthGrid, NM, UM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    /// Upper end of the phase range, radians.
    pub phase_max: f64,
    /// Defocus range in meters, `(min, max)`.
    pub z_range: (f64, f64),
    /// Draw one `z` for the whole dataset instead of one per sample.
    pub z_per_run: bool,
    pub band: WavelengthGrid,
    /// Channel centers in meters, ordered red, green, blue.
    pub channel_centers: [f64; 3],
    /// Channel width range in meters, `(min, max)`.
    pub sigma_c_range: (f64, f64),
    /// Noise standard deviation as a fraction of the mean channel intensity.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            phase_max: 3.5,
            z_range: (0.1 * UM, 3.0 * UM),
            z_per_run: false,
            band: WavelengthGrid::default(),
            channel_centers: [630.0 * NM, 550.0 * NM, 450.0 * NM],
            sigma_c_range: (10.0 * NM, 100.0 * NM),
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.phase_max.is_finite() && self.phase_max > 0.0) {
            return Err(Error::invalid("phase_max must be positive"));
        }
        let (z0, z1) = self.z_range;
        if !(z0 > 0.0 && z1 >= z0 && z1.is_finite()) {
            return Err(Error::invalid("z_range must be positive and ordered"));
        }
        let (s0, s1) = self.sigma_c_range;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return Err(Error::invalid("sigma_c_range must be positive and ordered"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        for &l in &self.channel_centers {
            SensorChannel::new(l, s0)?;
        }
        if self.band.is_empty() {
            return Err(Error::invalid("wavelength band is empty"));
        }
        Ok(())
    }
}

/// One `(X, Y)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Simulated acquisition, channels ordered red, green, blue.
    pub x: [RealImage; 3],
    /// Ground-truth phase, radians.
    pub y: PhaseMap,
    pub z: f64,
    pub sigma_c_used: [f64; 3],
    pub seed_used: u64,
}

/// Affine map of the image range onto `[0, phase_max]`; constant images map
/// to zero.
pub fn phase_from_grayscale(image: &RealImage, phase_max: f64) -> PhaseMap {
    let (lo, hi) = (image.min(), image.max());
    if hi > lo {
        let s = phase_max / (hi - lo);
        image.map(|v| ((v - lo) * s).clamp(0.0, phase_max))
    } else {
        image.map(|_| 0.0)
    }
}

/// Add white Gaussian noise with standard deviation `sigma * mean(image)`,
/// clamping the result at zero.
pub fn add_noise<R: Rng + ?Sized>(image: &RealImage, sigma: f64, rng: &mut R) -> Result<RealImage> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let std = sigma * image.mean();
    if std == 0.0 {
        return Ok(image.clone());
    }
    let mut data = image.data().clone();
    for v in data.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + std * n).max(0.0);
    }
    RealImage::new(data, image.pitch())
}

/// Seed of the stream owned by sample `index` (SplitMix64 finalizer).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Defocus shared by every sample when `z_per_run` is set.
pub fn run_defocus(spec: &SimulationSpec) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, u64::MAX));
    draw(&mut rng, spec.z_range)
}

/// Simulate one acquisition of `phase` using the stream seeded by `seed`.
pub fn simulate_sample(phase: &PhaseMap, spec: &SimulationSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = if spec.z_per_run { run_defocus(spec) } else { draw(&mut rng, spec.z_range) };
    let sigma_c_used = [(); 3].map(|_| draw(&mut rng, spec.sigma_c_range));
    let channels = [0, 1, 2].map(|c| SensorChannel { lambda_c: spec.channel_centers[c], sigma_c: sigma_c_used[c] });
    let object = ComplexField::from_phase(phase)?;
    let clean = polychromatic_channels(&object, z, &channels, &spec.band)?;
    let mut x = Vec::with_capacity(3);
    for img in &clean {
        x.push(add_noise(img, spec.noise_sigma, &mut rng)?);
    }
    let x: [RealImage; 3] = x.try_into().expect("three channels");
    Ok(Sample { x, y: phase.clone(), z, sigma_c_used, seed_used: seed })
}

/// Simulate a dataset from grayscale sources; sample `i` uses
/// `sample_seed(spec.seed, i)`.
pub fn simulate_dataset(sources: &[RealImage], spec: &SimulationSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let phase = phase_from_grayscale(src, spec.phase_max);
            simulate_sample(&phase, spec, sample_seed(spec.seed, i as u64))
                .map_err(|e| Error::Sample { index: i, source: Box::new(e) })
        })
        .collect()
}

/// Built-in grayscale source families for corpus-free operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedural {
    /// White noise low-passed with a Gaussian spectral envelope.
    FilteredNoise,
    /// Sum of random Gaussian blobs.
    Blobs,
    /// Random ellipses with additive densities (Shepp-Logan style).
    Phantom,
}

impl Procedural {
    pub const ALL: [Procedural; 3] = [Procedural::FilteredNoise, Procedural::Blobs, Procedural::Phantom];
}

/// Generate a procedural grayscale image with values in `[0, 1]`.
pub fn procedural_image(kind: Procedural, width: usize, height: usize, pitch: f64, seed: u64) -> Result<RealImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let data = match kind {
        Procedural::FilteredNoise => {
            let noise = Array2::from_shape_fn((height, width), |_| rng.sample::<f64, _>(StandardNormal));
            let mut s = crate::fft::fft2_real(&noise);
            let fx = crate::fft::fftfreq(width, 1.0);
            let fy = crate::fft::fftfreq(height, 1.0);
            let cutoff = rng.gen_range(0.04..0.10);
            for ((r, c), v) in s.indexed_iter_mut() {
                let f2 = fx[c] * fx[c] + fy[r] * fy[r];
                *v *= (-f2 / (2.0 * cutoff * cutoff)).exp();
            }
            crate::fft::ifft2_real(s)
        }
        Procedural::Blobs => {
            let n = rng.gen_range(4..12);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..w),
                        rng.gen_range(0.0..h),
                        rng.gen_range(0.05..0.2) * w.min(h),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            Array2::from_shape_fn((height, width), |(r, c)| {
                blobs
                    .iter()
                    .map(|&(cx, cy, s, a)| {
                        // periodic distance so the object tiles seamlessly
                        let dx = (c as f64 - cx).abs().min(w - (c as f64 - cx).abs());
                        let dy = (r as f64 - cy).abs().min(h - (r as f64 - cy).abs());
                        a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
                    })
                    .sum()
            })
        }
        Procedural::Phantom => {
            let n = rng.gen_range(3..8);
            let ellipses: Vec<(f64, f64, f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.25..0.75) * w,
                        rng.gen_range(0.25..0.75) * h,
                        rng.gen_range(0.08..0.3) * w,
                        rng.gen_range(0.08..0.3) * h,
                        rng.gen_range(0.0..PI),
                        rng.gen_range(-0.5..1.0),
                    )
                })
                .collect();
            let raw = Array2::from_shape_fn((height, width), |(r, c)| {
                ellipses
                    .iter()
                    .map(|&(cx, cy, a, b, th, d)| {
                        let (x, y) = (c as f64 - cx, r as f64 - cy);
                        let u = (x * th.cos() + y * th.sin()) / a;
                        let v = (-x * th.sin() + y * th.cos()) / b;
                        if u * u + v * v <= 1.0 {
                            d
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            });
            // soften edges so the phase stays band-limited
            let mut s = crate::fft::fft2_real(&raw);
            let fx = crate::fft::fftfreq(width, 1.0);
            let fy = crate::fft::fftfreq(height, 1.0);
            for ((r, c), v) in s.indexed_iter_mut() {
                let f2 = fx[c] * fx[c] + fy[r] * fy[r];
                *v *= (-f2 / (2.0 * 0.12 * 0.12)).exp();
            }
            crate::fft::ifft2_real(s)
        }
    };
    let img = RealImage::new(data, pitch)?;
    let (lo, hi) = (img.min(), img.max());
    Ok(if hi > lo { img.map(|v| (v - lo) / (hi - lo)) } else { img.map(|_| 0.0) })
}

/// `count` procedural sources cycling through the families.
pub fn procedural_sources(count: usize, width: usize, height: usize, pitch: f64, seed: u64) -> Result<Vec<RealImage>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let kind = Procedural::ALL[i % Procedural::ALL.len()];
            procedural_image(kind, width, height, pitch, sample_seed(seed ^ 0x5EED, i as u64))
        })
        .collect()
}

/// Load a PNG/PGM (or any format the `image` crate decodes) as grayscale in
/// `[0, 1]`.
pub fn load_grayscale(path: impl AsRef<Path>, pitch: f64) -> Result<RealImage> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / u16::MAX as f64
    });
    RealImage::new(data, pitch)
}

const DATASET_MAGIC: &[u8; 4] = b"ZMDS";
pub const DATASET_VERSION: u16 = 1;

/// Serialize samples to the `ZMDS` container.
///
/// Layout (little-endian): magic `ZMDS`, u16 version, u64 sample count; per
/// sample: u32 channels, u32 height, u32 width, f64 pitch, f64 z, 3 x f64
/// sigma_c, u64 seed, u32 y height, u32 y width, `channels*h*w` f64 for x
/// (channel-major, row-major), `h*w` f64 for y.
pub fn write_dataset_to<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        let (h, w) = s.x[0].data().dim();
        for v in [3u32, h as u32, w as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [s.x[0].pitch(), s.z, s.sigma_c_used[0], s.sigma_c_used[1], s.sigma_c_used[2]] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&s.seed_used.to_le_bytes())?;
        let (yh, yw) = s.y.data().dim();
        out.write_all(&(yh as u32).to_le_bytes())?;
        out.write_all(&(yw as u32).to_le_bytes())?;
        for ch in &s.x {
            for v in ch.data().iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for v in s.y.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset_to(samples, std::io::BufWriter::new(file))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("unexpected end of data reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn array(&mut self, h: usize, w: usize, what: &str) -> Result<Array2<f64>> {
        let bytes = self.take(h * w * 8, what)?;
        let v: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Array2::from_shape_vec((h, w), v).expect("length checked"))
    }
}

pub fn read_dataset_from_bytes(buf: &[u8]) -> Result<Vec<Sample>> {
    if buf.len() < 4 || &buf[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic { expected: "dataset" });
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version { what: "dataset", found: version, expected: DATASET_VERSION });
    }
    let count = r.u64("sample count")?;
    let mut samples = Vec::new();
    for i in 0..count {
        let what = format!("sample {i}");
        let channels = r.u32(&what)? as usize;
        let h = r.u32(&what)? as usize;
        let w = r.u32(&what)? as usize;
        let pitch = r.f64(&what)?;
        let z = r.f64(&what)?;
        let sigma_c_used = [r.f64(&what)?, r.f64(&what)?, r.f64(&what)?];
        let seed_used = r.u64(&what)?;
        let yh = r.u32(&what)? as usize;
        let yw = r.u32(&what)? as usize;
        if channels != 3 || (yh, yw) != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![3, h, w], got: vec![channels, yh, yw] });
        }
        let mut x = Vec::with_capacity(3);
        for _ in 0..3 {
            x.push(RealImage::new(r.array(h, w, &what)?, pitch).map_err(|e| Error::Corrupt(format!("{what}: {e}")))?);
        }
        let y = RealImage::new(r.array(h, w, &what)?, pitch).map_err(|e| Error::Corrupt(format!("{what}: {e}")))?;
        samples.push(Sample { x: x.try_into().expect("three channels"), y, z, sigma_c_used, seed_used });
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(samples)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    read_dataset_from_bytes(&buf)
}
