//! REINFORCE over the fine stages with the relative reward
//!
//! ```text
//! delta_i = [r(sample_i) - r(greedy_i)] + [r(sample_i) - r(prev_i)]
//! ```
//!
//! where `prev_i` is stage `i - 1`'s sampled caption (the coarse stage's for
//! `i = 1`). The loss gradient is `-sum_i delta_i * grad log p(sample_i)`,
//! averaged over the batch. The coarse stage gets no reward term of its own
//! but receives gradient through the hidden-state feeds.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{stack_features, SpatialFeatures};
use crate::decoder::{by_item, free_run, Encoded, Policy, StageRollout, StepOptions};
use crate::error::{Error, Result};
use crate::eval::validation_scores;
use crate::metrics::{Metric, ReferenceCorpus};
use crate::model::{ModelParams, Weights};
use crate::seed::derive_seed;
use crate::tape::{Tape, Var};
use crate::task::{Dataset, Example};
use crate::tensor::Tensor;

use super::adam::AdamConfig;
use super::log::{EpochLog, Phase, StageRewards};
use super::{collect_gradients, shuffled, TrainState};

/// Which caption of stage `i - 1` the second baseline scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrevStageSource {
    #[default]
    Sampled,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Subtract the stage's own greedy reward.
    pub greedy_baseline: bool,
    /// Add the improvement over the preceding stage.
    pub stage_baseline: bool,
    pub prev_stage_source: PrevStageSource,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            greedy_baseline: true,
            stage_baseline: true,
            prev_stage_source: PrevStageSource::Sampled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTriple {
    pub r_sample: f64,
    pub r_greedy: f64,
    pub r_prev: f64,
    pub delta: f64,
}

/// `delta = r_sample - [greedy] r_greedy + [stage] (r_sample - r_prev)`.
/// With both baselines on this is the two-bracket relative reward.
pub fn relative_reward(r_sample: f64, r_greedy: f64, r_prev: f64, cfg: &BaselineConfig) -> RewardTriple {
    let delta = match (cfg.greedy_baseline, cfg.stage_baseline) {
        (true, true) => (r_sample - r_greedy) + (r_sample - r_prev),
        (true, false) => r_sample - r_greedy,
        (false, true) => r_sample + (r_sample - r_prev),
        (false, false) => r_sample,
    };
    RewardTriple {
        r_sample,
        r_greedy,
        r_prev,
        delta,
    }
}

/// Rewards of fine stages `1..=N_f` of one image. `sampled` and `greedy` hold
/// every stage, coarse included.
pub fn compute_relative_rewards(
    sampled: &[StageRollout],
    greedy: &[StageRollout],
    image: u64,
    corpus: &ReferenceCorpus,
    metric: Metric,
    cfg: &BaselineConfig,
) -> Result<Vec<RewardTriple>> {
    if sampled.len() < 2 || greedy.len() != sampled.len() {
        return Err(Error::InvalidArgument(format!(
            "missing stage rollout: {} sampled, {} greedy",
            sampled.len(),
            greedy.len()
        )));
    }
    let r = |ro: &StageRollout| corpus.reward_for(image, ro.words(), metric);
    let rs: Vec<f64> = sampled.iter().map(r).collect::<Result<_>>()?;
    let rg: Vec<f64> = greedy.iter().map(r).collect::<Result<_>>()?;
    Ok((1..sampled.len())
        .map(|i| {
            let prev = match cfg.prev_stage_source {
                PrevStageSource::Sampled => rs[i - 1],
                PrevStageSource::Greedy => rg[i - 1],
            };
            relative_reward(rs[i], rg[i], prev, cfg)
        })
        .collect())
}

/// `-sum_k sum(log_probs[k] * advantages[k])`; its gradient is the policy
/// gradient estimate for per-entry advantages.
pub fn policy_gradient_surrogate(tape: &mut Tape, log_probs: &[Var], advantages: &[Tensor]) -> Result<Var> {
    if log_probs.len() != advantages.len() || log_probs.is_empty() {
        return Err(Error::InvalidArgument("one advantage tensor per log-prob term".into()));
    }
    let mut total: Option<Var> = None;
    for (&lp, adv) in log_probs.iter().zip(advantages) {
        let a = tape.constant(adv.clone())?;
        let prod = tape.mul(lp, a)?;
        let s = tape.sum(prod)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    tape.scale(total.expect("non-empty"), -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_image: usize,
    pub metric: Metric,
    pub baselines: BaselineConfig,
    pub detach_stage_feeds: bool,
    pub clip_norm: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Result of one REINFORCE estimate over a batch.
#[derive(Clone, Debug)]
pub struct RlBatch {
    pub grads: Weights<Tensor>,
    /// `[row][fine stage]`, rows are image-major with `samples_per_image` rows each.
    pub rewards: Vec<Vec<RewardTriple>>,
    /// `[row][stage]`
    pub sampled: Vec<Vec<StageRollout>>,
    /// `[image][stage]`
    pub greedy: Vec<Vec<StageRollout>>,
}

/// Samples every stage, greedy-decodes every stage, scores both and returns
/// the gradient of the surrogate weighted by `advantage` of each reward triple.
pub fn rl_gradients_weighted(
    params: &ModelParams,
    batch: &[&Example],
    corpus: &ReferenceCorpus,
    cfg: &RlConfig,
    rng: &mut ChaCha8Rng,
    advantage: &dyn Fn(&RewardTriple) -> f64,
) -> Result<RlBatch> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let spi = cfg.samples_per_image.max(1);
    let dims = &params.dims;
    let opts = StepOptions {
        detach_stage_feeds: cfg.detach_stage_feeds,
    };
    let feats: Vec<&SpatialFeatures> = batch.iter().map(|e| &e.features).collect();

    let greedy = {
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false)?;
        let v = tape.constant(stack_features(&feats)?)?;
        let enc = Encoded::new(&mut tape, &w, v, dims.regions())?;
        by_item(free_run(&mut tape, dims, &w, &enc, Policy::Greedy, opts)?.rollouts)
    };

    let mut tape = Tape::new();
    let w = params.bind(&mut tape, true)?;
    let rows: Vec<&SpatialFeatures> = feats.iter().flat_map(|f| std::iter::repeat(*f).take(spi)).collect();
    let v = tape.constant(stack_features(&rows)?)?;
    let enc = Encoded::new(&mut tape, &w, v, dims.regions())?;
    let run = free_run(&mut tape, dims, &w, &enc, Policy::Sample(rng), opts)?;
    let sampled = by_item(run.rollouts.clone());

    let mut rewards = Vec::with_capacity(rows.len());
    for (r, ro) in sampled.iter().enumerate() {
        let item = r / spi;
        rewards.push(compute_relative_rewards(
            ro,
            &greedy[item],
            batch[item].scene.id,
            corpus,
            cfg.metric,
            &cfg.baselines,
        )?);
    }

    let b = rows.len();
    let mut terms = Vec::new();
    let mut advs = Vec::new();
    for stage in 1..dims.num_stages() {
        let steps = run.picked[stage].len();
        if steps == 0 {
            continue;
        }
        let cols = tape.concat(&run.picked[stage])?;
        let mut a = vec![0.0; b * steps];
        for r in 0..b {
            let adv = advantage(&rewards[r][stage - 1]) / b as f64;
            for t in 0..steps {
                a[r * steps + t] = adv * run.mask[stage][t][r];
            }
        }
        terms.push(cols);
        advs.push(Tensor::new(vec![b, steps], a)?);
    }
    let surrogate = policy_gradient_surrogate(&mut tape, &terms, &advs)?;
    let mut g = tape.backward(surrogate)?;
    Ok(RlBatch {
        grads: collect_gradients(&mut g, &w),
        rewards,
        sampled,
        greedy,
    })
}

/// The REINFORCE gradient with advantages `delta`.
pub fn rl_gradients(
    params: &ModelParams,
    batch: &[&Example],
    corpus: &ReferenceCorpus,
    cfg: &RlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RlBatch> {
    rl_gradients_weighted(params, batch, corpus, cfg, rng, &|t| t.delta)
}

/// Batch means of the reward terms per fine stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RlDiagnostics {
    pub sums: Vec<[f64; 4]>,
    pub count: usize,
}

impl RlDiagnostics {
    pub fn add(&mut self, rewards: &[Vec<RewardTriple>]) {
        for row in rewards {
            if self.sums.len() < row.len() {
                self.sums.resize(row.len(), [0.0; 4]);
            }
            for (s, t) in self.sums.iter_mut().zip(row) {
                s[0] += t.r_sample;
                s[1] += t.r_greedy;
                s[2] += t.r_prev;
                s[3] += t.delta;
            }
            self.count += 1;
        }
    }

    pub fn means(&self) -> Vec<StageRewards> {
        let n = self.count.max(1) as f64;
        self.sums
            .iter()
            .enumerate()
            .map(|(i, s)| StageRewards {
                stage: i + 1,
                r_sample: s[0] / n,
                r_greedy: s[1] / n,
                r_prev: s[2] / n,
                delta: s[3] / n,
            })
            .collect()
    }
}

/// One REINFORCE update of `state` on `batch`; returns the reward terms.
pub fn rl_step(
    state: &mut TrainState,
    batch: &[&Example],
    corpus: &ReferenceCorpus,
    cfg: &RlConfig,
    rng_seed: u64,
) -> Result<Vec<Vec<RewardTriple>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let out = rl_gradients(&state.params, batch, corpus, cfg, &mut rng)?;
    state.apply(out.grads, &cfg.adam, cfg.clip_norm)?;
    Ok(out.rewards)
}

/// Runs RL epochs until `cfg.epochs` have completed, validating after each.
pub fn train_rl(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &RlConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Empty);
    }
    cfg.adam.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be > 0".into()));
    }
    let start = Instant::now();
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = crate::seed::rng_for(cfg.seed, &format!("rl/epoch/{epoch}"));
        let order = shuffled(data.train.len(), &mut rng);
        let mut diag = RlDiagnostics::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let seed = derive_seed(cfg.seed, &format!("rl/epoch/{epoch}/batch/{bi}"));
            let rewards = rl_step(state, &batch, &data.corpus, cfg, seed)?;
            diag.add(&rewards);
        }
        state.epoch = epoch;
        let (val_cider, val_bleu4) = validation_scores(&state.params, &data.val, &data.corpus)?;
        state.observe(val_cider);
        let log = EpochLog {
            phase: Phase::Rl,
            epoch,
            per_stage_losses: None,
            per_stage_rewards: Some(diag.means()),
            val_cider,
            val_bleu4,
            wall_time: start.elapsed().as_secs_f64(),
            config_hash: cfg.config_hash.clone(),
        };
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_reward_arithmetic() {
        let all = BaselineConfig::default();
        let t = relative_reward(1.0, 0.5, 0.25, &all);
        assert_eq!(t.delta, 1.25);
        assert_eq!(relative_reward(0.7, 0.7, 0.7, &all).delta, 0.0);
        let single = BaselineConfig {
            stage_baseline: false,
            ..all
        };
        assert_eq!(relative_reward(1.0, 0.5, 0.25, &single).delta, 0.5);
        let none = BaselineConfig {
            greedy_baseline: false,
            stage_baseline: false,
            ..all
        };
        assert_eq!(relative_reward(1.0, 0.5, 0.25, &none).delta, 1.0);
    }

    #[test]
    fn missing_stage_is_an_error() {
        let corpus = ReferenceCorpus::new([(0, vec![vec![5]])]).unwrap();
        let ro = StageRollout {
            tokens: vec![5],
            log_probs: vec![-0.1],
            attention: vec![],
            finished: false,
        };
        let err = compute_relative_rewards(
            &[ro.clone()],
            &[ro],
            0,
            &corpus,
            Metric::Cider,
            &BaselineConfig::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn surrogate_of_a_bandit_has_the_score_function_gradient() {
        // d/dz [-a * log softmax(z)_j] = -a * (e_j - p)
        let z = Tensor::row(&[0.3, -0.4]);
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone()).unwrap();
        let lp = tape.log_softmax(zv).unwrap();
        let picked = tape.pick(lp, &[1]).unwrap();
        let s = policy_gradient_surrogate(&mut tape, &[picked], &[Tensor::row(&[2.0])]).unwrap();
        let g = tape.backward(s).unwrap().wrt(zv);
        let p1 = 1.0 / (1.0 + (0.3f64 + 0.4).exp());
        let p0 = 1.0 - p1;
        assert!((g.data()[0] - 2.0 * p0).abs() < 1e-12);
        assert!((g.data()[1] + 2.0 * (1.0 - p1)).abs() < 1e-12);
    }
}
