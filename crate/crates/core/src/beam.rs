//! Beam search over the final stage.
//!
//! Each hypothesis carries the full multi-stage state. Lower stages decode
//! greedily inside every hypothesis; only the final stage branches. Scores
//! are summed final-stage log probabilities with no length normalisation.

use serde::{Deserialize, Serialize};

use crate::attention::{argmax, SpatialFeatures};
use crate::decoder::{step_all_stages, DecoderState, Encoded, StepOptions};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tape::Tape;
use crate::vocab::{TokenId, BOS, EOS, PAD};

pub const DEFAULT_BEAM: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Final-stage tokens, ending with EOS unless the length limit was hit.
    pub tokens: Vec<TokenId>,
    pub score: f64,
}

impl BeamHypothesis {
    pub fn words(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
struct Live {
    row: usize,
    tokens: Vec<TokenId>,
    score: f64,
    /// Next input token of each lower stage.
    lower_prev: Vec<TokenId>,
    lower_done: Vec<bool>,
}

/// Returns the best complete final-stage hypothesis for one image.
pub fn beam_search(params: &ModelParams, v: &SpatialFeatures, k: usize) -> Result<BeamHypothesis> {
    if k < 1 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    let dims = &params.dims;
    if v.grid() != dims.grid || v.dim() != dims.feature_dim {
        return Err(Error::shape("features", &[dims.regions(), dims.feature_dim], &[v.num_regions(), v.dim()]));
    }
    let last = dims.fine_stages;
    let opts = StepOptions::default();

    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false)?;
    let copies = vec![v; k];
    let enc = Encoded::from_features(&mut tape, &w, &copies)?;
    let mut state = DecoderState::initial(&mut tape, dims, k)?;

    let mut live = vec![Live {
        row: 0,
        tokens: Vec::new(),
        score: 0.0,
        lower_prev: vec![BOS; last],
        lower_done: vec![false; last],
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for t in 0..dims.max_len {
        // Rows without a live hypothesis decode PAD and are ignored.
        let mut prev = vec![vec![PAD; k]; dims.num_stages()];
        for h in &live {
            for (i, &tok) in h.lower_prev.iter().enumerate() {
                prev[i][h.row] = tok;
            }
            prev[last][h.row] = *h.tokens.last().unwrap_or(&BOS);
        }
        let (step, next) = step_all_stages(&mut tape, dims, &w, &enc, &state, &prev, opts)?;

        let final_lp = tape.value(step.log_probs[last]).clone();
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::with_capacity(live.len() * dims.vocab_size);
        for (hi, h) in live.iter().enumerate() {
            for (tok, lp) in final_lp.row_slice(h.row).iter().enumerate() {
                candidates.push((hi, tok, h.score + lp));
            }
        }
        // Stable: equal scores keep (hypothesis, token) order.
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));

        let mut next_live = Vec::with_capacity(k);
        for &(hi, tok, score) in candidates.iter().take(k) {
            let parent = &live[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if tok == EOS || t + 1 == dims.max_len {
                finished.push(BeamHypothesis { tokens, score });
                continue;
            }
            let mut lower_prev = Vec::with_capacity(last);
            let mut lower_done = parent.lower_done.clone();
            for i in 0..last {
                if lower_done[i] {
                    lower_prev.push(PAD);
                    continue;
                }
                let choice = argmax(tape.value(step.log_probs[i]).row_slice(parent.row));
                if choice == EOS {
                    lower_done[i] = true;
                    lower_prev.push(PAD);
                } else {
                    lower_prev.push(choice);
                }
            }
            next_live.push(Live {
                row: parent.row,
                tokens,
                score,
                lower_prev,
                lower_done,
            });
        }

        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = next_live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if next_live.is_empty() || best_finished >= best_live {
            break;
        }

        let mut rows: Vec<usize> = next_live.iter().map(|h| h.row).collect();
        rows.resize(k, next_live[0].row);
        state = next.select_rows(&mut tape, &rows)?;
        for (r, h) in next_live.iter_mut().enumerate() {
            h.row = r;
        }
        live = next_live;
    }

    // First-found wins ties.
    let mut best: Option<BeamHypothesis> = None;
    for h in finished {
        if best.as_ref().map_or(true, |b| h.score > b.score) {
            best = Some(h);
        }
    }
    best.ok_or(Error::Empty)
}
