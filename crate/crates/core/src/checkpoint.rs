//! Checkpoint archive: `USWC1` magic, a JSON manifest, then named f32 tensors.
//!
//! ```text
//! "USWC1" | u32 manifest_len | manifest JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data (LE)
//! ```
//! Optimizer moments, when present, follow the parameters as
//! `adamw.m.<name>` and `adamw.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::UltraSwin;
use crate::params::ParamStore;
use crate::training::{AdamW, EpochLoss, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"USWC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainProgress>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub log: Vec<EpochLoss>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
    pub moments: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl Checkpoint {
    pub fn from_model(model: &UltraSwin<f32>) -> Self {
        Self {
            manifest: Manifest {
                config: model.config().clone(),
                train: None,
            },
            params: model.params().clone(),
            moments: None,
        }
    }

    pub fn with_training(model: &UltraSwin<f32>, state: &TrainState, cfg: &TrainConfig) -> Self {
        Self {
            manifest: Manifest {
                config: model.config().clone(),
                train: Some(TrainProgress {
                    train_config: cfg.clone(),
                    epoch: state.epoch,
                    step: state.optimizer.step,
                    log: state.log.clone(),
                }),
            },
            params: model.params().clone(),
            moments: Some((state.optimizer.m.clone(), state.optimizer.v.clone())),
        }
    }

    pub fn model(&self) -> Result<UltraSwin<f32>> {
        UltraSwin::from_params(&self.manifest.config, self.params.clone())
    }

    /// Training state to resume from; fresh moments when none were stored.
    pub fn train_state(&self, cfg: &TrainConfig) -> TrainState {
        let mut optimizer = AdamW::new(&self.params, cfg);
        let mut state = TrainState {
            optimizer: optimizer.clone(),
            epoch: 0,
            log: Vec::new(),
        };
        if let Some(p) = &self.manifest.train {
            state.epoch = p.epoch;
            state.log = p.log.clone();
            optimizer.step = p.step;
        }
        if let Some((m, v)) = &self.moments {
            optimizer.m = m.clone();
            optimizer.v = v.clone();
        }
        state.optimizer = optimizer;
        state
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);

        let mut tensors: Vec<(String, &[usize], &[f32])> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.as_slice(), p.data.as_slice()))
            .collect();
        if let Some((m, v)) = &self.moments {
            if m.len() != self.params.len() || v.len() != self.params.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
            for (prefix, moments) in [("adamw.m.", m), ("adamw.v.", v)] {
                for (p, data) in self.params.iter().zip(moments) {
                    tensors.push((format!("{prefix}{}", p.name), p.shape.as_slice(), data.as_slice()));
                }
            }
        }
        put_u32(&mut out, tensors.len())?;
        for (name, shape, data) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len())?;
            for &d in shape {
                put_u32(&mut out, d)?;
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let len = r.u32()?;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if name.starts_with("adamw.m.") {
                m.push(data);
            } else if name.starts_with("adamw.v.") {
                v.push(data);
            } else {
                params.add(name, shape, data);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let moments = match (m.len(), v.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((m, v)),
            _ => return Err(Error::Checkpoint("incomplete optimizer state".into())),
        };
        Ok(Self {
            manifest,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
