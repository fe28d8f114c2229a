//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected. The config hash is the SHA-256 of the config's JSON
//! serialization, whose field order is fixed by this struct. The output
//! directory and the epoch counts are blanked before hashing, so a run can be
//! extended or moved without invalidating its checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::ModelDims;
use crate::seed::derive_seed;
use crate::task::{self, FEATURE_DIM};
use crate::train::adam::AdamConfig;
use crate::train::rl::{BaselineConfig, PrevStageSource, RlConfig};
use crate::train::xe::XeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; component seeds are derived from it.
    pub seed: u64,

    pub n_train: usize,
    pub n_val: usize,
    pub grid: usize,
    /// Read the dataset from here instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,

    pub hidden: usize,
    /// Must equal `hidden`.
    pub attention: usize,
    pub embed_dim: usize,
    pub fine_stages: usize,
    pub max_len: usize,

    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,

    pub xe_lr: f64,
    pub xe_epochs: usize,
    pub xe_batch_size: usize,

    pub rl_lr: f64,
    pub rl_epochs: usize,
    pub rl_batch_size: usize,
    pub rl_samples_per_image: usize,
    /// `cider`, `bleu4` or `mix`.
    pub reward: String,
    pub greedy_baseline: bool,
    pub stage_baseline: bool,
    pub prev_stage_source: PrevStageSource,
    pub detach_stage_feeds: bool,

    pub beam: usize,

    pub gradcheck_step: f64,
    pub gradcheck_tol: f64,

    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            n_train: task::DEFAULT_TRAIN,
            n_val: task::DEFAULT_VAL,
            grid: task::GRID,
            data_dir: None,
            hidden: 64,
            attention: 64,
            embed_dim: 32,
            fine_stages: 2,
            max_len: 12,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            xe_lr: 4e-4,
            xe_epochs: 30,
            xe_batch_size: 2,
            rl_lr: 5e-5,
            rl_epochs: 10,
            rl_batch_size: 16,
            rl_samples_per_image: 1,
            reward: "cider".into(),
            greedy_baseline: true,
            stage_baseline: true,
            prev_stage_source: PrevStageSource::Sampled,
            detach_stage_feeds: false,
            beam: crate::beam::DEFAULT_BEAM,
            gradcheck_step: 3e-4,
            gradcheck_tol: 1e-4,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Config {
    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Config {
            n_train: 16,
            n_val: 8,
            grid: 2,
            hidden: 8,
            attention: 8,
            embed_dim: 4,
            max_len: 12,
            xe_epochs: 2,
            rl_epochs: 1,
            xe_batch_size: 4,
            rl_batch_size: 4,
            out_dir: PathBuf::from("runs/tiny"),
            ..Config::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        self.metric()?;
        self.xe_adam().validate()?;
        self.rl_adam().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_train == 0 || self.n_val == 0 {
            return bad("n_train and n_val must be > 0");
        }
        if self.grid < 2 {
            return bad("grid must be >= 2");
        }
        if self.xe_batch_size == 0 || self.rl_batch_size == 0 || self.rl_samples_per_image == 0 {
            return bad("batch sizes and samples per image must be > 0");
        }
        if self.max_len < crate::task::MAX_CAPTION_LEN {
            return Err(Error::Config(format!(
                "max_len {} cannot hold the {}-token references",
                self.max_len,
                crate::task::MAX_CAPTION_LEN
            )));
        }
        if self.beam == 0 {
            return bad("beam must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(self.gradcheck_step > 0.0) || !(self.gradcheck_tol > 0.0) {
            return bad("gradcheck_step and gradcheck_tol must be > 0");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let keyed = Config {
            out_dir: PathBuf::new(),
            xe_epochs: 0,
            rl_epochs: 0,
            ..self.clone()
        };
        let json = serde_json::to_string(&keyed).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn metric(&self) -> Result<Metric> {
        self.reward.parse()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: task::vocabulary().len(),
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            attention: self.attention,
            feature_dim: FEATURE_DIM,
            grid: self.grid,
            fine_stages: self.fine_stages,
            max_len: self.max_len,
        }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn xe_adam(&self) -> AdamConfig {
        self.adam(self.xe_lr)
    }

    pub fn rl_adam(&self) -> AdamConfig {
        self.adam(self.rl_lr)
    }

    pub fn xe_config(&self) -> XeConfig {
        XeConfig {
            adam: self.xe_adam(),
            epochs: self.xe_epochs,
            batch_size: self.xe_batch_size,
            clip_norm: self.clip_norm,
            seed: derive_seed(self.seed, "xe"),
            config_hash: self.hash(),
        }
    }

    pub fn rl_config(&self) -> Result<RlConfig> {
        Ok(RlConfig {
            adam: self.rl_adam(),
            epochs: self.rl_epochs,
            batch_size: self.rl_batch_size,
            samples_per_image: self.rl_samples_per_image,
            metric: self.metric()?,
            baselines: BaselineConfig {
                greedy_baseline: self.greedy_baseline,
                stage_baseline: self.stage_baseline,
                prev_stage_source: self.prev_stage_source,
            },
            detach_stage_feeds: self.detach_stage_feeds,
            clip_norm: self.clip_norm,
            seed: derive_seed(self.seed, "rl"),
            config_hash: self.hash(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_carry_the_reference_settings() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.beam, 5);
        assert_eq!(c.xe_lr, 4e-4);
        assert_eq!(c.rl_lr, 5e-5);
        assert_eq!(c.adam_beta1, 0.9);
        assert_eq!(c.dims().vocab_size, 21);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(Config::from_toml_str("hiden = 3"), Err(Error::Config(_))));
        let c = Config::from_toml_str("hidden = 8\nattention = 8\nreward = \"bleu4\"").unwrap();
        assert_eq!(c.hidden, 8);
        assert_eq!(c.xe_epochs, 30);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("reward = \"meteor\"").is_err());
        assert!(Config::from_toml_str("hidden = 8").is_err());
        assert!(Config::from_toml_str("xe_lr = 0.0").is_err());
        assert!(Config::from_toml_str("fine_stages = 0").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = Config {
            data_dir: Some("data".into()),
            ..Config::default()
        };
        let back = Config::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(Config::default().hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_schedule_length_and_output_dir() {
        let a = Config::default();
        let b = Config {
            xe_epochs: 3,
            rl_epochs: 1,
            out_dir: "elsewhere".into(),
            ..Config::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = Config { seed: 8, ..Config::default() };
        assert_ne!(a.hash(), c.hash());
    }
}
