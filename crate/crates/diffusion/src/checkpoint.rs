//! `CDM1` checkpoints.
//!
//! All integers are little-endian. Field order:
//!
//! ```text
//! magic        4 bytes  "CDM1"
//! version      u32      1
//! config       u32 resolution, image_channels, mode (0 positional, 1 metric),
//!              num_classes, width0, width1, width2, emb_dim, groups,
//!              timesteps, cond_bands; u64 init_seed
//! step         u64      optimizer steps taken
//! schedule     u32 count, then count f64 alpha_bar values
//! table        u32 tensor count, then per tensor:
//!              u32 name length, UTF-8 name, u32 rank, rank x u32 dims
//! weights      f32 values of every tensor, in table order
//! ema flag     u8 (0 or 1)
//! ema weights  present when the flag is 1; same layout as weights
//! ```

use std::io::{Read, Write};

use candle_core::{Device, Tensor};

use geocond::ConditioningMode;

use crate::error::{DiffusionError, Result};
use crate::model::{Denoiser, DenoiserConfig};
use crate::schedule::DiffusionSchedule;

pub const MAGIC: &[u8; 4] = b"CDM1";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub model: Denoiser,
    pub ema: Option<Vec<Tensor>>,
    pub step: u64,
}

impl Checkpoint {
    /// Weights to sample with: the moving average when present.
    pub fn sampling_weights(&self) -> Vec<Tensor> {
        self.ema.clone().unwrap_or_else(|| self.model.tensors())
    }
}

fn u32le<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DiffusionError::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_blob<W: Write>(w: &mut W, tensors: &[Tensor]) -> Result<()> {
    for t in tensors {
        let v = t.flatten_all()?.to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(v.len() * 4);
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn save<W: Write>(mut w: W, model: &Denoiser, ema: Option<&[Tensor]>, step: u64) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mode = match c.mode {
        ConditioningMode::Positional => 0,
        ConditioningMode::Metric => 1,
    };
    for v in [
        c.resolution,
        c.image_channels,
        mode,
        c.num_classes,
        c.widths[0],
        c.widths[1],
        c.widths[2],
        c.emb_dim,
        c.groups,
        c.timesteps,
        c.cond_bands,
    ] {
        u32le(&mut w, v)?;
    }
    w.write_all(&c.init_seed.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    let schedule = DiffusionSchedule::cosine(c.timesteps);
    u32le(&mut w, schedule.steps())?;
    for a in schedule.alpha_bars() {
        w.write_all(&a.to_le_bytes())?;
    }
    let tensors = model.tensors();
    u32le(&mut w, tensors.len())?;
    for (name, t) in model.names().iter().zip(&tensors) {
        u32le(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        u32le(&mut w, t.rank())?;
        for &d in t.dims() {
            u32le(&mut w, d)?;
        }
    }
    write_blob(&mut w, &tensors)?;
    match ema {
        Some(e) => {
            w.write_all(&[1])?;
            write_blob(&mut w, e)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| DiffusionError::Checkpoint(format!("{what}: unexpected end of file")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, shapes: &[Vec<usize>], what: &str) -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let b = self.bytes(n * 4, what)?;
                let v: Vec<f32> = b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                Ok(Tensor::from_vec(v, s.as_slice(), &Device::Cpu)?)
            })
            .collect()
    }
}

pub fn load<R: Read>(r: R) -> Result<Checkpoint> {
    let mut rd = Reader { inner: r };
    if rd.bytes(4, "magic")? != MAGIC {
        return Err(DiffusionError::Checkpoint("magic: expected \"CDM1\"".into()));
    }
    let version = rd.u32("version")?;
    if version != VERSION as usize {
        return Err(DiffusionError::Checkpoint(format!("version: unsupported {version}")));
    }
    let mut f = [0usize; 11];
    for v in &mut f {
        *v = rd.u32("config")?;
    }
    let mode = match f[2] {
        0 => ConditioningMode::Positional,
        1 => ConditioningMode::Metric,
        m => return Err(DiffusionError::Checkpoint(format!("mode: unknown value {m}"))),
    };
    let config = DenoiserConfig {
        resolution: f[0],
        image_channels: f[1],
        mode,
        num_classes: f[3],
        widths: [f[4], f[5], f[6]],
        emb_dim: f[7],
        groups: f[8],
        timesteps: f[9],
        cond_bands: f[10],
        init_seed: rd.u64("init_seed")?,
    };
    config
        .validate()
        .map_err(|e| DiffusionError::Checkpoint(format!("config: {e}")))?;
    let step = rd.u64("step")?;
    let count = rd.u32("schedule")?;
    let expected = DiffusionSchedule::cosine(config.timesteps);
    if count != expected.steps() {
        return Err(DiffusionError::Checkpoint(format!(
            "schedule: {count} steps for {} timesteps",
            config.timesteps
        )));
    }
    for (i, a) in expected.alpha_bars().iter().enumerate() {
        let b = rd.bytes(8, "schedule")?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if v != *a {
            return Err(DiffusionError::Checkpoint(format!("schedule: alpha_bar[{i}] differs")));
        }
    }
    let model = Denoiser::new(config)?;
    let n = rd.u32("table")?;
    if n != model.names().len() {
        return Err(DiffusionError::Checkpoint(format!(
            "table: {n} tensors, architecture has {}",
            model.names().len()
        )));
    }
    let mut shapes = Vec::with_capacity(n);
    for (name, var) in model.names().iter().zip(model.vars()) {
        let len = rd.u32("table")?;
        let got = rd.bytes(len.min(1024), "table")?;
        if got != name.as_bytes() {
            return Err(DiffusionError::Checkpoint(format!(
                "table: expected tensor {name}, found {}",
                String::from_utf8_lossy(&got)
            )));
        }
        let rank = rd.u32("table")?;
        if rank > 8 {
            return Err(DiffusionError::Checkpoint(format!("table: {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| rd.u32("table")).collect::<Result<Vec<_>>>()?;
        if dims != var.dims() {
            return Err(DiffusionError::Checkpoint(format!(
                "table: {name} is {dims:?}, architecture expects {:?}",
                var.dims()
            )));
        }
        shapes.push(dims);
    }
    let weights = rd.blob(&shapes, "weights")?;
    model.load(&weights)?;
    let ema = match rd.bytes(1, "ema flag")?[0] {
        0 => None,
        1 => Some(rd.blob(&shapes, "ema weights")?),
        v => return Err(DiffusionError::Checkpoint(format!("ema flag: invalid value {v}"))),
    };
    Ok(Checkpoint { model, ema, step })
}

pub fn save_file(path: &std::path::Path, model: &Denoiser, ema: Option<&[Tensor]>, step: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(&mut w, model, ema, step)?;
    w.flush()?;
    Ok(())
}

pub fn load_file(path: &std::path::Path) -> Result<Checkpoint> {
    load(std::io::BufReader::new(std::fs::File::open(path)?))
}
