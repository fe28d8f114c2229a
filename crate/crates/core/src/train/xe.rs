use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{stack_features, SpatialFeatures};
use crate::decoder::{teacher_forced, Encoded, StepOptions, TeacherForced};
use crate::error::{Error, Result};
use crate::eval::validation_scores;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{ModelParams, Weights};
use crate::seed::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::task::Dataset;
use crate::vocab::{TokenId, PAD};

use super::adam::AdamConfig;
use super::log::{EpochLog, Phase};
use super::{collect_gradients, shuffled, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XeConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// `-sum_t log p(gold_t)` for one stage; positions whose gold token is PAD are skipped.
pub fn stage_xe_loss(dists: &[Vec<f64>], gold: &[TokenId]) -> Result<f64> {
    if dists.len() != gold.len() {
        return Err(Error::shape("xe_loss", &[gold.len()], &[dists.len()]));
    }
    let mut loss = 0.0;
    for (d, &g) in dists.iter().zip(gold) {
        if g == PAD {
            continue;
        }
        let p = *d.get(g).ok_or(Error::OutOfRange {
            what: "gold token",
            index: g,
            size: d.len(),
        })?;
        loss -= p.ln();
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "xe_loss" });
    }
    Ok(loss)
}

/// Sum of the per-stage losses over every stage, `dists[stage][t][word]`.
pub fn xe_loss(dists: &[Vec<Vec<f64>>], gold: &[TokenId]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Empty);
    }
    dists.iter().map(|d| stage_xe_loss(d, gold)).sum()
}

/// Batch-mean XE loss on the tape.
#[derive(Clone, Debug)]
pub struct XeLoss {
    pub loss: Var,
    /// Batch mean of each stage's loss.
    pub per_stage: Vec<f64>,
}

pub fn xe_loss_on_tape(tape: &mut Tape, tf: &TeacherForced) -> Result<XeLoss> {
    let steps = tf.targets.len();
    let batch = tf.targets.first().ok_or(Error::Empty)?.len();
    let mut mask = Vec::with_capacity(batch * steps);
    for r in 0..batch {
        for t in 0..steps {
            mask.push(-tf.mask[t][r] / batch as f64);
        }
    }
    let weight = tape.constant(Tensor::from_parts(vec![batch, steps], mask))?;
    let mut total: Option<Var> = None;
    let mut per_stage = Vec::with_capacity(tf.log_probs.len());
    for stage in &tf.log_probs {
        let picked = stage
            .iter()
            .zip(&tf.targets)
            .map(|(&lp, targets)| tape.pick(lp, targets))
            .collect::<Result<Vec<_>>>()?;
        let cols = tape.concat(&picked)?;
        let weighted = tape.mul(cols, weight)?;
        let s = tape.sum(weighted)?;
        per_stage.push(tape.value(s).item());
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(XeLoss {
        loss: total.ok_or(Error::Empty)?,
        per_stage,
    })
}

#[derive(Clone, Debug)]
pub struct XeBatch {
    pub grads: Weights<Tensor>,
    pub loss: f64,
    pub per_stage: Vec<f64>,
}

/// Gradient of the batch-mean XE loss for `(features, gold)` pairs; gold ends with EOS.
pub fn xe_gradients(params: &ModelParams, batch: &[(&SpatialFeatures, Vec<TokenId>)], opts: StepOptions) -> Result<XeBatch> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, true)?;
    let feats: Vec<&SpatialFeatures> = batch.iter().map(|(f, _)| *f).collect();
    let v = tape.constant(stack_features(&feats)?)?;
    let enc = Encoded::new(&mut tape, &w, v, params.dims.regions())?;
    let gold: Vec<Vec<TokenId>> = batch.iter().map(|(_, g)| g.clone()).collect();
    let tf = teacher_forced(&mut tape, &params.dims, &w, &enc, &gold, opts)?;
    let xe = xe_loss_on_tape(&mut tape, &tf)?;
    let loss = tape.value(xe.loss).item();
    let mut grads = tape.backward(xe.loss)?;
    Ok(XeBatch {
        grads: collect_gradients(&mut grads, &w),
        loss,
        per_stage: xe.per_stage,
    })
}

/// Finite-difference check of the XE loss gradient of the whole unrolled
/// model, every parameter entry included. Only practical for tiny models.
pub fn xe_grad_check(
    params: &ModelParams,
    batch: &[(&SpatialFeatures, Vec<TokenId>)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let named: Vec<(String, Tensor)> = params
        .weights
        .names()
        .into_iter()
        .zip(params.weights.flatten().into_iter().cloned())
        .collect();
    let feats: Vec<&SpatialFeatures> = batch.iter().map(|(f, _)| *f).collect();
    let stacked = stack_features(&feats)?;
    let gold: Vec<Vec<TokenId>> = batch.iter().map(|(_, g)| g.clone()).collect();
    let dims = params.dims;
    grad_check(
        |tape, vars| {
            let mut it = vars.iter();
            let w = params.weights.map(|_, _| *it.next().expect("one var per parameter"));
            let v = tape.constant(stacked.clone())?;
            let enc = Encoded::new(tape, &w, v, dims.regions())?;
            let tf = teacher_forced(tape, &dims, &w, &enc, &gold, StepOptions::default())?;
            Ok(xe_loss_on_tape(tape, &tf)?.loss)
        },
        &named,
        step,
        tol,
    )
}

/// Runs XE epochs until `cfg.epochs` have completed, validating after each.
/// `on_epoch` sees every log record and the state right after validation.
pub fn train_xe(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &XeConfig,
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
    let stages = state.params.dims.num_stages();
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = rng_for(cfg.seed, &format!("xe/epoch/{epoch}"));
        let order = shuffled(data.train.len(), &mut rng);
        let mut sums = vec![0.0; stages];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&SpatialFeatures, Vec<TokenId>)> = chunk
                .iter()
                .map(|&i| {
                    let e = &data.train[i];
                    (&e.features, e.gold(rng.gen_range(0..e.refs.len())))
                })
                .collect();
            let out = xe_gradients(&state.params, &batch, StepOptions::default())?;
            for (s, l) in sums.iter_mut().zip(&out.per_stage) {
                *s += l * chunk.len() as f64;
            }
            state.apply(out.grads, &cfg.adam, cfg.clip_norm)?;
        }
        state.epoch = epoch;
        let (val_cider, val_bleu4) = validation_scores(&state.params, &data.val, &data.corpus)?;
        state.observe(val_cider);
        let n = data.train.len() as f64;
        let log = EpochLog {
            phase: Phase::Xe,
            epoch,
            per_stage_losses: Some(sums.iter().map(|s| s / n).collect()),
            per_stage_rewards: None,
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
    use crate::decoder::rollout_teacher_forced;
    use crate::decoder::tests::{random_features, random_model, tiny_dims};
    use crate::vocab::EOS;

    #[test]
    fn certain_predictions_give_zero_loss() {
        let gold = [5, 6, EOS];
        let onehot = |g: usize| (0..8).map(|w| if w == g { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let stage: Vec<Vec<f64>> = gold.iter().map(|&g| onehot(g)).collect();
        assert_eq!(xe_loss(&[stage.clone(), stage.clone(), stage], &gold).unwrap(), 0.0);
    }

    #[test]
    fn uniform_predictions_give_analytic_loss() {
        let gold = [4, 5, 6, 7, EOS];
        let stage = vec![vec![1.0 / 32.0; 32]; 5];
        let l = xe_loss(&[stage.clone(), stage.clone(), stage], &gold).unwrap();
        assert!((l - 3.0 * 5.0 * 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(stage_xe_loss(&[vec![0.5, 0.5]], &[0, 1]).is_err());
    }

    #[test]
    fn total_is_sum_of_stage_losses_and_matches_tape() {
        let dims = tiny_dims(9, 5);
        let p = random_model(dims, 4);
        let v = random_features(&dims, 4);
        let gold = vec![5, 7, 6, EOS];
        let dists = rollout_teacher_forced(&p, &v, &gold).unwrap();
        let total = xe_loss(&dists, &gold).unwrap();
        let parts: f64 = dists.iter().map(|d| stage_xe_loss(d, &gold).unwrap()).sum();
        assert!((total - parts).abs() < 1e-12);

        let out = xe_gradients(&p, &[(&v, gold.clone())], StepOptions::default()).unwrap();
        assert!((out.loss - total).abs() < 1e-10);
        for (d, s) in dists.iter().zip(&out.per_stage) {
            assert!((stage_xe_loss(d, &gold).unwrap() - s).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_loss_is_the_mean_of_item_losses() {
        let dims = tiny_dims(9, 5);
        let p = random_model(dims, 5);
        let (v1, v2) = (random_features(&dims, 1), random_features(&dims, 2));
        let (g1, g2) = (vec![5, EOS], vec![6, 7, 8, EOS]);
        let a = xe_gradients(&p, &[(&v1, g1.clone())], StepOptions::default()).unwrap();
        let b = xe_gradients(&p, &[(&v2, g2.clone())], StepOptions::default()).unwrap();
        let ab = xe_gradients(&p, &[(&v1, g1), (&v2, g2)], StepOptions::default()).unwrap();
        assert!((ab.loss - 0.5 * (a.loss + b.loss)).abs() < 1e-12);
        let mut mean = a.grads.clone();
        mean.add_assign(&b.grads).unwrap();
        mean.scale(0.5);
        assert!(mean.max_abs_diff(&ab.grads) < 1e-12);
    }
}
