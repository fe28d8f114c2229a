use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Rl,
}

/// Epoch means of the reward terms of one fine stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRewards {
    pub stage: usize,
    pub r_sample: f64,
    pub r_greedy: f64,
    pub r_prev: f64,
    pub delta: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub phase: Phase,
    /// 1-based.
    pub epoch: usize,
    /// Mean per-caption cross-entropy of each stage (XE phase).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_stage_losses: Option<Vec<f64>>,
    /// RL phase only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_stage_rewards: Option<Vec<StageRewards>>,
    /// Final-stage greedy CIDEr on the validation split.
    pub val_cider: f64,
    pub val_bleu4: f64,
    /// Seconds since the phase started.
    pub wall_time: f64,
    pub config_hash: String,
}

impl EpochLog {
    /// The record with its timing field zeroed, for reproducibility comparisons.
    pub fn without_time(&self) -> EpochLog {
        EpochLog {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

pub fn append_jsonl(path: &Path, record: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
