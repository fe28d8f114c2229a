//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "C2FCKPT\0"
//! version   u32
//! length    u64      byte length of the manifest
//! manifest  JSON     see [`Manifest`]
//! tensors            every parameter in manifest order, then (if present)
//!                    every Adam first moment, then every second moment
//! ```
//!
//! Each tensor is written as `ndim: u32`, `dims: u64 * ndim`, `data: f64 * numel`.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::train::adam::AdamState;
use crate::train::{Phase, TrainState};

pub const MAGIC: &[u8; 8] = b"C2FCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// The run's config with `out_dir` blanked, so reruns elsewhere match byte for byte.
    pub config: Config,
    pub config_hash: String,
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
    pub best_val_cider: Option<f64>,
    pub best_epoch: usize,
    pub dims: ModelDims,
    pub tensors: Vec<TensorEntry>,
    /// Adam step counter, when optimizer moments are stored.
    pub adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config: &Config, phase: Phase, params: ModelParams, adam: Option<AdamState>, epoch: usize) -> Self {
        let tensors = params
            .weights
            .shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        Checkpoint {
            manifest: Manifest {
                version: VERSION,
                config: Config {
                    out_dir: PathBuf::new(),
                    ..config.clone()
                },
                config_hash: config.hash(),
                phase,
                epoch,
                best_val_cider: None,
                best_epoch: 0,
                dims: params.dims,
                tensors,
                adam_step: adam.as_ref().map(|a| a.step),
            },
            params,
            adam,
        }
    }

    /// The current parameters and optimizer state of a training run.
    pub fn from_state(config: &Config, phase: Phase, state: &TrainState) -> Self {
        let mut c = Self::new(config, phase, state.params.clone(), Some(state.adam.clone()), state.epoch);
        c.set_best(state);
        c
    }

    /// The best parameters of a training run, without optimizer state.
    pub fn best_of(config: &Config, phase: Phase, state: &TrainState) -> Option<Self> {
        let params = state.best_params.clone()?;
        let mut c = Self::new(config, phase, params, None, state.best_epoch);
        c.set_best(state);
        Some(c)
    }

    fn set_best(&mut self, state: &TrainState) {
        self.manifest.best_val_cider = state.best_val_cider.is_finite().then_some(state.best_val_cider);
        self.manifest.best_epoch = state.best_epoch;
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        for t in self.params.weights.flatten() {
            t.write_le(&mut out).map_err(io)?;
        }
        if let Some(a) = &self.adam {
            for t in a.m.iter().chain(&a.v) {
                t.write_le(&mut out).map_err(io)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        read(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut b8 = [0u8; 8];
        read(&mut r, &mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > r.len() {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        r = &r[len..];

        if manifest.version != version {
            return Err(Error::Checkpoint("manifest version disagrees with header".into()));
        }
        manifest.config.validate()?;
        if manifest.config_hash != manifest.config.hash() {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        if manifest.dims != manifest.config.dims() {
            return Err(Error::Checkpoint("model dims do not match the stored config".into()));
        }
        let mut params = ModelParams::init(manifest.dims, 0)?;
        let skeleton = params.weights.shapes();
        let listed: Vec<(String, Vec<usize>)> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if listed != skeleton {
            return Err(Error::Checkpoint("tensor names or shapes do not match the model".into()));
        }
        let mut slots = params.weights.flatten_mut();
        for (slot, (name, shape)) in slots.iter_mut().zip(&skeleton) {
            let t = Tensor::read_le(&mut r)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", t.shape())));
            }
            **slot = t;
        }
        let adam = match manifest.adam_step {
            Some(step) => {
                let mut moments = Vec::with_capacity(2 * skeleton.len());
                for i in 0..2 * skeleton.len() {
                    let t = Tensor::read_le(&mut r)?;
                    let (name, shape) = &skeleton[i % skeleton.len()];
                    if t.shape() != shape.as_slice() {
                        return Err(Error::Checkpoint(format!("optimizer moment of {name} has shape {:?}", t.shape())));
                    }
                    moments.push(t);
                }
                let v = moments.split_off(skeleton.len());
                Some(AdamState { step, m: moments, v })
            }
            None => None,
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { manifest, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless this checkpoint was produced under `config`.
    pub fn check_config(&self, config: &Config) -> Result<()> {
        if self.manifest.dims != config.dims() {
            return Err(Error::Checkpoint(format!(
                "checkpoint model {:?} does not match config model {:?}",
                self.manifest.dims,
                config.dims()
            )));
        }
        if self.manifest.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} differs from {}",
                self.manifest.config_hash,
                config.hash()
            )));
        }
        Ok(())
    }

    /// Training state to resume from. Requires stored optimizer moments.
    pub fn into_state(self) -> Result<TrainState> {
        let adam = self
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Ok(TrainState {
            params: self.params,
            adam,
            epoch: self.manifest.epoch,
            best_val_cider: self.manifest.best_val_cider.unwrap_or(f64::NEG_INFINITY),
            best_epoch: self.manifest.best_epoch,
            best_params: None,
        })
    }
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}
