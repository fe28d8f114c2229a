//! Cross-entropy pretraining and the multi-stage REINFORCE phase.

pub mod adam;
pub mod log;
pub mod rl;
pub mod xe;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ModelParams, Weights};
use crate::tape::{Gradients, Var};
use crate::tensor::Tensor;

use adam::{adam_update, clip_global_norm, AdamConfig, AdamState};

pub use log::{EpochLog, Phase, StageRewards};

/// Everything a training phase mutates, and what a checkpoint restores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    /// Best validation CIDEr seen in this phase, `-inf` before the first epoch.
    pub best_val_cider: f64,
    pub best_epoch: usize,
    pub best_params: Option<ModelParams>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(params.weights.flatten());
        TrainState {
            params,
            adam,
            epoch: 0,
            best_val_cider: f64::NEG_INFINITY,
            best_epoch: 0,
            best_params: None,
        }
    }

    /// Records a validation score; returns whether it is a new best.
    pub fn observe(&mut self, val_cider: f64) -> bool {
        if val_cider > self.best_val_cider {
            self.best_val_cider = val_cider;
            self.best_epoch = self.epoch;
            self.best_params = Some(self.params.clone());
            true
        } else {
            false
        }
    }

    /// Clips `grads` to `clip_norm` and applies one Adam step. Returns the pre-clip norm.
    pub fn apply(&mut self, mut grads: Weights<Tensor>, adam: &AdamConfig, clip_norm: f64) -> Result<f64> {
        let norm = clip_global_norm(&mut grads.flatten_mut(), clip_norm);
        let g = grads.flatten();
        adam_update(&mut self.params.weights.flatten_mut(), &g, &mut self.adam, adam)?;
        Ok(norm)
    }
}

/// Moves the gradient of every bound parameter out of `grads`.
pub fn collect_gradients(grads: &mut Gradients, vars: &Weights<Var>) -> Weights<Tensor> {
    vars.map(|_, &v| grads.take(v))
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
