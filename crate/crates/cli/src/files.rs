//! Reading inputs and writing phase artifacts.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use qpi_core::io::{read_tensor, write_tensor, StoredTensor, TensorData};
use qpi_core::{PhaseMap, RealImage};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// How to turn a 16-bit PNG back into radians: `value = min + pixel * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PngScale {
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub units: String,
}

/// Min-max scale `img` into a 16-bit grayscale PNG. Constant images map to
/// all-zero pixels with `scale = 0`.
pub fn write_png16(path: &Path, img: &RealImage) -> Result<PngScale, CliError> {
    let (min, max) = (img.min(), img.max());
    let span = max - min;
    let scale = if span > 0.0 { span / u16::MAX as f64 } else { 0.0 };
    let data = img.data();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |c, r| {
            let v = data[[r as usize, c as usize]];
            let q = if scale > 0.0 { ((v - min) / scale).round().clamp(0.0, u16::MAX as f64) } else { 0.0 };
            Luma([q as u16])
        });
    buf.save(path)?;
    Ok(PngScale { min, max, scale, units: "rad".into() })
}

pub fn write_f32_tensor(path: &Path, shape: Vec<usize>, values: impl Iterator<Item = f64>) -> Result<(), CliError> {
    let t = StoredTensor::new(shape, TensorData::F32(values.map(|v| v as f32).collect()))?;
    write_tensor(path, &t)?;
    Ok(())
}

pub fn write_f64_tensor(path: &Path, shape: Vec<usize>, values: Vec<f64>) -> Result<(), CliError> {
    let t = StoredTensor::new(shape, TensorData::F64(values))?;
    write_tensor(path, &t)?;
    Ok(())
}

pub fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn image_from_slice(h: usize, w: usize, values: &[f64], pitch: f64) -> Result<RealImage, CliError> {
    let data = ndarray::Array2::from_shape_vec((h, w), values.to_vec()).expect("length checked by caller");
    Ok(RealImage::new(data, pitch)?)
}

/// Split a tensor into `[H, W]` planes. Rank 2 is one plane; higher ranks
/// are flattened over all leading axes.
pub fn tensor_planes(t: &StoredTensor, pitch: f64) -> Result<Vec<RealImage>, CliError> {
    if t.shape.len() < 2 {
        return Err(CliError::usage(format!("tensor of shape {:?} has no image planes", t.shape)));
    }
    let (h, w) = (t.shape[t.shape.len() - 2], t.shape[t.shape.len() - 1]);
    let values = t.data.to_f64();
    if h * w == 0 {
        return Ok(Vec::new());
    }
    values.chunks_exact(h * w).map(|c| image_from_slice(h, w, c, pitch)).collect()
}

/// Image planes of a PNG (one for grayscale, red/green/blue for colour)
/// scaled to `[0, 1]`, or of a `ZMDT` tensor.
pub fn load_planes(path: &Path, pitch: f64) -> Result<Vec<RealImage>, CliError> {
    if has_extension(path, "zmdt") {
        return tensor_planes(&read_tensor(path)?, pitch);
    }
    let img = image::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_unit = |v: u16| v as f64 / u16::MAX as f64;
    if img.color().has_color() {
        let rgb = img.into_rgb16();
        (0..3)
            .map(|c| {
                let v: Vec<f64> = rgb.pixels().map(|p| to_unit(p.0[c])).collect();
                image_from_slice(h, w, &v, pitch)
            })
            .collect()
    } else {
        let v: Vec<f64> = img.into_luma16().pixels().map(|p| to_unit(p.0[0])).collect();
        Ok(vec![image_from_slice(h, w, &v, pitch)?])
    }
}

/// Phase maps for evaluation from a dataset (ground truth), a tensor, or a
/// directory of tensors (sorted by name).
///
/// Rank-4 tensors `[N, S, H, W]` hold `S` draws per input; their average is
/// used.
pub fn load_phase_maps(path: &Path) -> Result<Vec<PhaseMap>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| has_extension(p, "zmdt"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_phase_maps(&f)?);
        }
        return Ok(out);
    }
    if has_extension(path, "zmds") {
        return Ok(qpi_core::dataset::read_dataset(path)?.into_iter().map(|s| s.y).collect());
    }
    if !has_extension(path, "zmdt") {
        return Err(CliError::usage(format!(
            "{}: expected a .zmds dataset, a .zmdt tensor or a directory",
            path.display()
        )));
    }
    let t = read_tensor(path)?;
    let planes = tensor_planes(&t, 1.0)?;
    if t.shape.len() != 4 || t.shape[1] <= 1 {
        return Ok(planes);
    }
    let draws = t.shape[1];
    planes
        .chunks(draws)
        .map(|group| {
            let mut acc = group[0].data().clone();
            for g in &group[1..] {
                acc += g.data();
            }
            Ok(RealImage::new(acc / draws as f64, 1.0)?)
        })
        .collect()
}
