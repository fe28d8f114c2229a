//! Lockstep multi-stage decoding.
//!
//! All stages advance one timestep together. At step `t` the coarse stage
//! reads its previous token, the mean region feature and the last fine
//! stage's hidden state from `t - 1`; fine stage `i` then reads its previous
//! token, its attended context and stage `i - 1`'s hidden state from the
//! same step. A stage that has emitted EOS is fed PAD from then on so that
//! the cross-stage feeds stay defined; those positions carry no loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, argmax, stack_features, AttentionMap, SpatialFeatures};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, Weights};
use crate::nn;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Images decoded per tape when running inference over many scenes.
pub const DECODE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOptions {
    /// Cut gradients through the hidden/context feeds between stages.
    pub detach_stage_feeds: bool,
}

/// Time-invariant quantities of one batch of images.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    pub regions: usize,
    /// Mean region feature `f(V)`, `[B, d_v]`.
    pub global: Var,
    /// Projected values per stage `0..=N_f`, `[B * N, d_a]`.
    pub values: Vec<Var>,
    /// Attention keys per stage (`None` for the coarse stage), `[B * N, d_a]`.
    pub keys: Vec<Option<Var>>,
    /// Stage-0 values averaged under the uniform initial attention, `[B, d_a]`.
    pub initial_context: Var,
}

impl Encoded {
    /// `features` is `[B * N, d_v]` with `regions = N` rows per image.
    pub fn new(tape: &mut Tape, w: &Weights<Var>, features: Var, regions: usize) -> Result<Self> {
        let rows = tape.value(features).rows();
        if regions == 0 || rows % regions != 0 {
            return Err(Error::shape("encode", tape.value(features).shape(), &[regions]));
        }
        let global = tape.group_mean(features, regions)?;
        let mut values = Vec::with_capacity(w.stages.len());
        let mut keys = Vec::with_capacity(w.stages.len());
        for s in &w.stages {
            values.push(attention::project_values(tape, features, &s.value)?);
            keys.push(match &s.attention {
                Some(a) => Some(attention::project_regions(tape, features, a)?),
                None => None,
            });
        }
        let initial_context = tape.group_mean(values[0], regions)?;
        Ok(Encoded {
            batch: rows / regions,
            regions,
            global,
            values,
            keys,
            initial_context,
        })
    }

    pub fn from_features(tape: &mut Tape, w: &Weights<Var>, items: &[&SpatialFeatures]) -> Result<Self> {
        let regions = items.first().ok_or(Error::Empty)?.num_regions();
        let v = tape.constant(stack_features(items)?)?;
        Self::new(tape, w, v, regions)
    }
}

/// Recurrent state of every stage for a batch.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub t: usize,
    /// Per stage, `[B, d_h]`.
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// Last attention weights per stage (`None` for the coarse stage and before the first step).
    pub alpha: Vec<Option<Var>>,
}

impl DecoderState {
    /// Zero hidden and cell states.
    pub fn initial(tape: &mut Tape, dims: &ModelDims, batch: usize) -> Result<Self> {
        let zero = tape.constant(Tensor::zeros(&[batch, dims.hidden]))?;
        let n = dims.num_stages();
        Ok(DecoderState {
            t: 0,
            h: vec![zero; n],
            c: vec![zero; n],
            alpha: vec![None; n],
        })
    }

    /// Gathers batch rows, e.g. to follow surviving beam hypotheses.
    pub fn select_rows(&self, tape: &mut Tape, rows: &[usize]) -> Result<Self> {
        let mut pick = |v: Var| tape.index_select(v, rows);
        let h = self.h.iter().map(|&v| pick(v)).collect::<Result<_>>()?;
        let c = self.c.iter().map(|&v| pick(v)).collect::<Result<_>>()?;
        let alpha = self
            .alpha
            .iter()
            .map(|a| a.map(&mut pick).transpose())
            .collect::<Result<_>>()?;
        Ok(DecoderState { t: self.t, h, c, alpha })
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Per stage log word distribution, `[B, |V|]`.
    pub log_probs: Vec<Var>,
    /// Per stage attention weights, `[B, N]` (`None` for the coarse stage).
    pub alpha: Vec<Option<Var>>,
}

fn feed(tape: &mut Tape, v: Var, opts: StepOptions) -> Var {
    if opts.detach_stage_feeds {
        tape.detach(v)
    } else {
        v
    }
}

/// Advances every stage by one timestep. `prev_tokens[i]` holds the previous
/// token of stage `i` for each batch row.
pub fn step_all_stages(
    tape: &mut Tape,
    dims: &ModelDims,
    w: &Weights<Var>,
    enc: &Encoded,
    state: &DecoderState,
    prev_tokens: &[Vec<TokenId>],
    opts: StepOptions,
) -> Result<(StepOutput, DecoderState)> {
    if state.t >= dims.max_len {
        return Err(Error::OutOfRange {
            what: "timestep",
            index: state.t,
            size: dims.max_len,
        });
    }
    let n = dims.num_stages();
    if prev_tokens.len() != n || prev_tokens.iter().any(|p| p.len() != enc.batch) {
        return Err(Error::InvalidArgument(format!(
            "expected {n} stages of {} previous tokens",
            enc.batch
        )));
    }

    let shared_input = prev_tokens.iter().all(|p| p == &prev_tokens[0]);
    let shared_emb = if shared_input {
        Some(nn::embed(tape, w.embedding, &prev_tokens[0])?)
    } else {
        None
    };

    let mut next = DecoderState {
        t: state.t + 1,
        h: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
    };
    let mut log_probs = Vec::with_capacity(n);
    let mut context_prev = enc.initial_context;

    for (i, sw) in w.stages.iter().enumerate() {
        let emb = match shared_emb {
            Some(e) => e,
            None => nn::embed(tape, w.embedding, &prev_tokens[i])?,
        };
        let (x, alpha) = match &sw.attention {
            None => {
                let last = feed(tape, state.h[n - 1], opts);
                (tape.concat(&[emb, enc.global, last])?, None)
            }
            Some(a) => {
                let below = feed(tape, next.h[i - 1], opts);
                let ctx_below = feed(tape, context_prev, opts);
                let h_bar = attention::fuse_with_context(tape, below, ctx_below)?;
                let keys = enc.keys[i].expect("fine stage has attention keys");
                let alpha = attention::attend(tape, keys, h_bar, a)?;
                let ctx = attention::attended_context(tape, alpha, enc.values[i])?;
                context_prev = ctx;
                (tape.concat(&[emb, ctx, below])?, Some(alpha))
            }
        };
        let out = nn::lstm_step(tape, &sw.lstm, state.h[i], state.c[i], x)?;
        log_probs.push(nn::predict_word_log_dist(tape, &sw.head, out.o)?);
        next.h.push(out.h);
        next.c.push(out.c);
        next.alpha.push(alpha);
    }
    let alpha = next.alpha.clone();
    Ok((StepOutput { log_probs, alpha }, next))
}

/// Checks a gold caption: non-empty, ends with EOS, fits in `max_len`, ids in range.
pub fn validate_gold(dims: &ModelDims, gold: &[TokenId]) -> Result<()> {
    if gold.last() != Some(&EOS) {
        return Err(Error::InvalidArgument("gold caption must end with EOS".into()));
    }
    if gold.len() > dims.max_len {
        return Err(Error::OutOfRange {
            what: "gold length",
            index: gold.len(),
            size: dims.max_len,
        });
    }
    if let Some(&bad) = gold.iter().find(|&&id| id >= dims.vocab_size) {
        return Err(Error::OutOfRange {
            what: "token id",
            index: bad,
            size: dims.vocab_size,
        });
    }
    Ok(())
}

/// Teacher-forced log distributions for a batch.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `[stage][t]`, each `[B, |V|]`.
    pub log_probs: Vec<Vec<Var>>,
    /// `[t][row]` gold token (PAD past the end).
    pub targets: Vec<Vec<TokenId>>,
    /// `[t][row]` 1 where a gold token exists, else 0.
    pub mask: Vec<Vec<f64>>,
}

/// Runs every stage on the same gold prefixes.
pub fn teacher_forced(
    tape: &mut Tape,
    dims: &ModelDims,
    w: &Weights<Var>,
    enc: &Encoded,
    gold: &[Vec<TokenId>],
    opts: StepOptions,
) -> Result<TeacherForced> {
    if gold.len() != enc.batch {
        return Err(Error::shape("teacher_forced", &[enc.batch], &[gold.len()]));
    }
    for g in gold {
        validate_gold(dims, g)?;
    }
    let steps = gold.iter().map(Vec::len).max().unwrap_or(0);
    let mut state = DecoderState::initial(tape, dims, enc.batch)?;
    let mut out = TeacherForced {
        log_probs: vec![Vec::with_capacity(steps); dims.num_stages()],
        targets: Vec::with_capacity(steps),
        mask: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let prev: Vec<TokenId> = gold
            .iter()
            .map(|g| match t {
                0 => BOS,
                _ => g.get(t - 1).copied().unwrap_or(PAD),
            })
            .collect();
        let prev_all = vec![prev; dims.num_stages()];
        let (step, next) = step_all_stages(tape, dims, w, enc, &state, &prev_all, opts)?;
        for (i, lp) in step.log_probs.into_iter().enumerate() {
            out.log_probs[i].push(lp);
        }
        out.targets.push(gold.iter().map(|g| g.get(t).copied().unwrap_or(PAD)).collect());
        out.mask.push(gold.iter().map(|g| if t < g.len() { 1.0 } else { 0.0 }).collect());
        state = next;
    }
    Ok(out)
}

/// One stage's generated caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRollout {
    /// Emitted tokens, ending with EOS when `finished`.
    pub tokens: Vec<TokenId>,
    /// Log probability of each emitted token.
    pub log_probs: Vec<f64>,
    /// Attention weights at each emitted token (empty for the coarse stage).
    pub attention: Vec<AttentionMap>,
    /// Whether EOS was emitted before the length limit.
    pub finished: bool,
}

impl StageRollout {
    fn empty() -> Self {
        StageRollout {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            attention: Vec::new(),
            finished: false,
        }
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Tokens without the trailing EOS.
    pub fn words(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// How a free-running stage picks its next token.
pub enum Policy<'r> {
    Greedy,
    Sample(&'r mut ChaCha8Rng),
}

/// Draws an index from the distribution `exp(log_probs)`.
pub fn sample_index(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Free-running decode of a batch.
#[derive(Clone, Debug)]
pub struct FreeRun {
    /// `[stage][row]`
    pub rollouts: Vec<Vec<StageRollout>>,
    /// `[stage][t]`: log probability of the token each row emitted, `[B, 1]`.
    /// Rows that had already finished pick PAD and are masked out.
    pub picked: Vec<Vec<Var>>,
    /// `[stage][t][row]`
    pub mask: Vec<Vec<Vec<f64>>>,
}

pub fn free_run(
    tape: &mut Tape,
    dims: &ModelDims,
    w: &Weights<Var>,
    enc: &Encoded,
    mut policy: Policy<'_>,
    opts: StepOptions,
) -> Result<FreeRun> {
    let (n, b) = (dims.num_stages(), enc.batch);
    let mut state = DecoderState::initial(tape, dims, b)?;
    let mut prev = vec![vec![BOS; b]; n];
    let mut done = vec![vec![false; b]; n];
    let mut run = FreeRun {
        rollouts: vec![vec![StageRollout::empty(); b]; n],
        picked: vec![Vec::new(); n],
        mask: vec![Vec::new(); n],
    };
    for _ in 0..dims.max_len {
        if done.iter().flatten().all(|&d| d) {
            break;
        }
        let (step, next) = step_all_stages(tape, dims, w, enc, &state, &prev, opts)?;
        for i in 0..n {
            let lp = tape.value(step.log_probs[i]).clone();
            let alpha = step.alpha[i].map(|a| tape.value(a).clone());
            let mut chosen = vec![PAD; b];
            let mut mask = vec![0.0; b];
            for r in 0..b {
                if done[i][r] {
                    continue;
                }
                let row = lp.row_slice(r);
                let tok = match &mut policy {
                    Policy::Greedy => argmax(row),
                    Policy::Sample(rng) => sample_index(row, rng),
                };
                let ro = &mut run.rollouts[i][r];
                ro.tokens.push(tok);
                ro.log_probs.push(row[tok]);
                if let Some(a) = &alpha {
                    ro.attention.push(AttentionMap::new(a.row_slice(r).to_vec())?);
                }
                if tok == EOS {
                    ro.finished = true;
                    done[i][r] = true;
                }
                chosen[r] = tok;
                mask[r] = 1.0;
            }
            run.picked[i].push(tape.pick(step.log_probs[i], &chosen)?);
            run.mask[i].push(mask);
            prev[i] = chosen.iter().map(|&tok| if tok == EOS { PAD } else { tok }).collect();
            for r in 0..b {
                if done[i][r] {
                    prev[i][r] = PAD;
                }
            }
        }
        state = next;
    }
    Ok(run)
}

/// Transposes `[stage][row]` to `[row][stage]`.
pub fn by_item(mut rollouts: Vec<Vec<StageRollout>>) -> Vec<Vec<StageRollout>> {
    let rows = rollouts.first().map_or(0, Vec::len);
    let mut out: Vec<Vec<StageRollout>> = (0..rows).map(|_| Vec::with_capacity(rollouts.len())).collect();
    for stage in rollouts.iter_mut() {
        for (r, ro) in stage.drain(..).enumerate() {
            out[r].push(ro);
        }
    }
    out
}

fn check_features(params: &ModelParams, v: &SpatialFeatures) -> Result<()> {
    let d = &params.dims;
    if v.grid() != d.grid || v.dim() != d.feature_dim {
        return Err(Error::shape(
            "features",
            &[d.grid * d.grid, d.feature_dim],
            &[v.num_regions(), v.dim()],
        ));
    }
    Ok(())
}

/// Word distributions of every stage at every gold position, `[stage][t][word]`.
pub fn rollout_teacher_forced(params: &ModelParams, v: &SpatialFeatures, gold: &[TokenId]) -> Result<Vec<Vec<Vec<f64>>>> {
    check_features(params, v)?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false)?;
    let enc = Encoded::from_features(&mut tape, &w, &[v])?;
    let tf = teacher_forced(&mut tape, &params.dims, &w, &enc, &[gold.to_vec()], StepOptions::default())?;
    Ok(tf
        .log_probs
        .iter()
        .map(|stage| {
            stage
                .iter()
                .map(|&lp| tape.value(lp).data().iter().map(|x| x.exp()).collect())
                .collect()
        })
        .collect())
}

/// Greedy rollouts of every stage for a batch of images, `[item][stage]`.
pub fn greedy_batch(params: &ModelParams, items: &[&SpatialFeatures]) -> Result<Vec<Vec<StageRollout>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(DECODE_CHUNK) {
        for v in chunk {
            check_features(params, v)?;
        }
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false)?;
        let enc = Encoded::from_features(&mut tape, &w, chunk)?;
        let run = free_run(&mut tape, &params.dims, &w, &enc, Policy::Greedy, StepOptions::default())?;
        out.extend(by_item(run.rollouts));
    }
    Ok(out)
}

/// Per-stage greedy rollouts for one image.
pub fn rollout_greedy(params: &ModelParams, v: &SpatialFeatures) -> Result<Vec<StageRollout>> {
    Ok(greedy_batch(params, &[v])?.remove(0))
}

/// Per-stage sampled rollouts for one image, deterministic in `seed`.
pub fn rollout_sampled(params: &ModelParams, v: &SpatialFeatures, seed: u64) -> Result<Vec<StageRollout>> {
    check_features(params, v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false)?;
    let enc = Encoded::from_features(&mut tape, &w, &[v])?;
    let run = free_run(
        &mut tape,
        &params.dims,
        &w,
        &enc,
        Policy::Sample(&mut rng),
        StepOptions::default(),
    )?;
    Ok(by_item(run.rollouts).remove(0))
}
