//! `DEN1` denoiser checkpoints. See `docs/checkpoint.md` for the byte layout.

use std::path::Path;

use super::denoiser::{DenoiserConfig, DenoiserWeights, ToyDenoiser};
use super::schedule::{NoiseSchedule, Weighting};
use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DENOISER_MAGIC: &[u8; 4] = b"DEN1";
pub const DENOISER_VERSION: u32 = 1;

pub fn denoiser_to_bytes(d: &ToyDenoiser) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DENOISER_MAGIC);
    w.u32(DENOISER_VERSION);
    let c = &d.config;
    for v in [c.image_channels, c.condition_channels, c.hidden, c.layers, c.time_dim, c.styles] {
        w.len_u32(v);
    }
    w.f64(c.sigma_data);
    let s = &d.schedule;
    w.len_u32(s.steps);
    w.f64(s.beta_start);
    w.f64(s.beta_end);
    match s.weighting {
        Weighting::Constant { value } => {
            w.u32(0);
            w.f64(value);
        }
        Weighting::OneMinusAlphaBar => {
            w.u32(1);
            w.f64(0.0);
        }
    }
    w.f64(s.t_range.0);
    w.f64(s.t_range.1);
    for (_, g) in d.weights.groups() {
        w.f64s(g);
    }
    w.buf
}

pub fn denoiser_from_bytes(bytes: &[u8]) -> Result<ToyDenoiser> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DENOISER_MAGIC)?;
    let version = r.u32()?;
    if version != DENOISER_VERSION {
        return Err(Error::Checkpoint(format!("unsupported denoiser version {version}")));
    }
    let config = DenoiserConfig {
        image_channels: r.usize()?,
        condition_channels: r.usize()?,
        hidden: r.usize()?,
        layers: r.usize()?,
        time_dim: r.usize()?,
        styles: r.usize()?,
        sigma_data: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let (steps, beta_start, beta_end) = (r.usize()?, r.f64()?, r.f64()?);
    let kind = r.u32()?;
    let value = r.f64()?;
    let weighting = match kind {
        0 => Weighting::Constant { value },
        1 => Weighting::OneMinusAlphaBar,
        k => return Err(Error::Checkpoint(format!("unknown weighting kind {k}"))),
    };
    let mut schedule = NoiseSchedule::linear(steps, beta_start, beta_end);
    schedule.weighting = weighting;
    schedule.t_range = (r.f64()?, r.f64()?);
    schedule
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored schedule is invalid: {e}")))?;
    // Shapes come from the config; values are overwritten below.
    let mut weights = DenoiserWeights::init(&config, &mut rand::rngs::mock::StepRng::new(0, 0));
    for (name, g) in weights.groups_mut() {
        *g = r.f64s_exact(g.len(), &name)?;
    }
    r.finish()?;
    Ok(ToyDenoiser { config, schedule, weights })
}

pub fn save_denoiser(d: &ToyDenoiser, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &denoiser_to_bytes(d))
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<ToyDenoiser> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    denoiser_from_bytes(&bytes)
}
