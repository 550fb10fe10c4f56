//! Checkpoint files.
//!
//! Layout (little-endian): magic `CDRC`, version byte, `u64`-prefixed UTF-8
//! config text, `u64` item count, `u64` tensor count, then per tensor a
//! `u32`-prefixed name, `u64` rows, `u64` cols and the `f64` values; the
//! Adam step and moments; `u64` epoch; `f64` best validation metric.

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::TrainConfig;
use crate::model::{CdrModel, Dims};

use super::adam::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDRC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("checkpoint does not fit the configuration: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: CdrModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_metric: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.push(CHECKPOINT_VERSION);
        let cfg = self.config.to_text();
        b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&(self.model.dims.items as u64).to_le_bytes());
        b.extend_from_slice(&(self.model.params.len() as u64).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            b.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        b.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for v in self.adam.m.iter().chain(&self.adam.v) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&self.best_metric.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("bad magic bytes".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let cfg_len = r.len()?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| CheckpointError::Format("config is not UTF-8".into()))?;
        let config = TrainConfig::from_text(cfg_text)
            .map_err(|e| CheckpointError::Format(format!("embedded config: {e}")))?;
        let items = r.len()?;
        let dims = Dims::from_config(&config, items);
        let layout = dims.layout();
        let n = r.len()?;
        if n != layout.len() {
            return Err(CheckpointError::Format(format!(
                "{n} tensors stored, configuration needs {}",
                layout.len()
            )));
        }
        let mut params = ParamStore::new();
        for (name, rows, cols) in layout {
            let len = r.u32()? as usize;
            let stored = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
            let (sr, sc) = (r.len()?, r.len()?);
            if stored != name || (sr, sc) != (rows, cols) {
                return Err(CheckpointError::Format(format!(
                    "tensor {stored} {sr}x{sc} does not match {name} {rows}x{cols}"
                )));
            }
            let data = r.f64s(rows * cols)?;
            params.push(name, Tensor::new(rows, cols, data));
        }
        let step = u64::from_le_bytes(r.array()?);
        let n_mom = r.len()?;
        if n_mom != params.num_params() {
            return Err(CheckpointError::Format("optimizer state length".into()));
        }
        let m = r.f64s(n_mom)?;
        let v = r.f64s(n_mom)?;
        let epoch = r.len()?;
        let best_metric = f64::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self {
            config,
            model: CdrModel { dims, params },
            adam: AdamState { step, m, v },
            epoch,
            best_metric,
        })
    }

    /// Errors unless the stored shapes match `cfg` over `items` items.
    pub fn check_compatible(&self, cfg: &TrainConfig, items: usize) -> Result<(), CheckpointError> {
        let want = Dims::from_config(cfg, items);
        if want != self.model.dims {
            return Err(CheckpointError::ShapeMismatch(format!(
                "stored I={} K={} H={} C={} hidden={:?}, expected I={} K={} H={} C={} hidden={:?}",
                self.model.dims.items,
                self.model.dims.k,
                self.model.dims.h,
                self.model.dims.c,
                self.model.dims.hidden,
                want.items,
                want.k,
                want.h,
                want.c,
                want.hidden
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.array()?);
        usize::try_from(v).map_err(|_| CheckpointError::Format(format!("length {v} too large")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ck.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and checks the shapes against `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &TrainConfig, items: usize) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    ck.check_compatible(cfg, items)?;
    Ok(ck)
}
