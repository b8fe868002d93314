//! Single-file model checkpoints (`ZMDC`).
//!
//! Layout (little-endian): magic `ZMDC`, u16 version, u32 metadata length,
//! UTF-8 JSON metadata (configuration, network and schedule specs, training
//! counters), then three length-prefixed f64 arrays: parameters, Adam first
//! moments, Adam second moments. Values are stored bit-exactly so a resumed
//! run continues an interrupted one without drift.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DiffusionConfig, DiffusionModel, TrainState};
use super::schedule::ScheduleSpec;
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, Optimizer, OptimizerConfig};

const MAGIC: &[u8; 4] = b"ZMDC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: DiffusionConfig,
    noise_net: NetworkSpec,
    mean_net: NetworkSpec,
    schedule: ScheduleSpec,
    train: Option<TrainMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    optimizer: OptimizerConfig,
    optimizer_step: u64,
    step: u64,
    seed: u64,
}

fn write_array<W: Write>(out: &mut W, v: &[f64]) -> Result<()> {
    out.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &DiffusionModel, state: Option<&TrainState>, mut out: W) -> Result<()> {
    let meta = Meta {
        config: model.config.clone(),
        noise_net: model.noise_net.spec().clone(),
        mean_net: model.mean_net.spec().clone(),
        schedule: model.schedule.spec().clone(),
        train: state.map(|s| TrainMeta {
            optimizer: s.optimizer.config,
            optimizer_step: s.optimizer.step,
            step: s.step,
            seed: s.seed,
        }),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Corrupt(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    write_array(&mut out, &model.params())?;
    let empty = Vec::new();
    write_array(&mut out, state.map_or(&empty, |s| &s.optimizer.m))?;
    write_array(&mut out, state.map_or(&empty, |s| &s.optimizer.v))?;
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &DiffusionModel, state: Option<&TrainState>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, state, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()) as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt(format!("{what} length")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

pub fn read_checkpoint(buf: &[u8]) -> Result<(DiffusionModel, Option<TrainState>)> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "checkpoint" });
    }
    let mut c = Cursor { buf, pos: 4 };
    let version = u16::from_le_bytes(c.take(2, "header")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u32::from_le_bytes(c.take(4, "header")?.try_into().unwrap()) as usize;
    let meta: Meta = serde_json::from_slice(c.take(len, "metadata")?).map_err(|e| Error::Corrupt(e.to_string()))?;
    let params = c.array("parameters")?;
    let m = c.array("optimizer state")?;
    let v = c.array("optimizer state")?;
    if c.pos != buf.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let mut model = DiffusionModel::new(meta.config, meta.noise_net, meta.mean_net, meta.schedule)?;
    model.set_params(&params)?;
    let state = match meta.train {
        Some(t) => {
            let mut optimizer = Optimizer::new(t.optimizer, model.num_params());
            if m.len() != optimizer.m.len() || v.len() != optimizer.v.len() {
                return Err(Error::Corrupt("optimizer state size does not match the model".into()));
            }
            optimizer.m = m;
            optimizer.v = v;
            optimizer.step = t.optimizer_step;
            Some(TrainState { optimizer, step: t.step, seed: t.seed })
        }
        None => None,
    };
    Ok((model, state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DiffusionModel, Option<TrainState>)> {
    read_checkpoint(&std::fs::read(path)?)
}
