//! Scoring decoded captions against the reference corpus.

use serde::{Deserialize, Serialize};

use crate::attention::SpatialFeatures;
use crate::beam::beam_search;
use crate::decoder::{greedy_batch, StageRollout};
use crate::error::{Error, Result};
use crate::metrics::{bleu_n, score_all, ReferenceCorpus, Scores};
use crate::model::ModelParams;
use crate::task::Example;
use crate::vocab::TokenId;

/// Greedy rollouts of every stage, `[example][stage]`.
pub fn greedy_rollouts(params: &ModelParams, examples: &[Example]) -> Result<Vec<Vec<StageRollout>>> {
    let feats: Vec<&SpatialFeatures> = examples.iter().map(|e| &e.features).collect();
    greedy_batch(params, &feats)
}

fn exact_match(examples: &[Example], captions: &[Vec<TokenId>]) -> f64 {
    let hits = examples
        .iter()
        .zip(captions)
        .filter(|(e, c)| e.refs.iter().any(|r| r == *c))
        .count();
    hits as f64 / examples.len() as f64
}

/// Final-stage greedy CIDEr and BLEU-4, the numbers checkpoints are selected by.
pub fn validation_scores(params: &ModelParams, examples: &[Example], corpus: &ReferenceCorpus) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let rollouts = greedy_rollouts(params, examples)?;
    let mut cider = 0.0;
    let mut bleu = 0.0;
    for (e, r) in examples.iter().zip(&rollouts) {
        let words = r.last().expect("at least two stages").words();
        cider += corpus.cider_for(e.scene.id, words)?;
        bleu += bleu_n(words, &e.refs, 4)?;
    }
    let n = examples.len() as f64;
    Ok((cider / n, bleu / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    #[serde(flatten)]
    pub scores: Scores,
    /// Share of captions equal to one of the references.
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamReport {
    pub beam: usize,
    #[serde(flatten)]
    pub scores: Scores,
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub num_images: usize,
    /// Greedy decoding, stages `0..=N_f`.
    pub per_stage: Vec<StageReport>,
    /// Final-stage beam search, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam: Option<BeamReport>,
    pub config_hash: String,
}

pub fn evaluate(
    params: &ModelParams,
    examples: &[Example],
    corpus: &ReferenceCorpus,
    beam: Option<usize>,
    split: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let rollouts = greedy_rollouts(params, examples)?;
    let mut per_stage = Vec::with_capacity(params.dims.num_stages());
    for stage in 0..params.dims.num_stages() {
        let caps: Vec<Vec<TokenId>> = rollouts.iter().map(|r| r[stage].words().to_vec()).collect();
        let pairs: Vec<(u64, Vec<TokenId>)> = examples.iter().map(|e| e.scene.id).zip(caps.iter().cloned()).collect();
        per_stage.push(StageReport {
            stage,
            scores: score_all(corpus, &pairs)?,
            exact_match: exact_match(examples, &caps),
        });
    }
    let beam = match beam {
        Some(k) => {
            let caps = examples
                .iter()
                .map(|e| beam_search(params, &e.features, k).map(|h| h.words().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(u64, Vec<TokenId>)> = examples.iter().map(|e| e.scene.id).zip(caps.iter().cloned()).collect();
            Some(BeamReport {
                beam: k,
                scores: score_all(corpus, &pairs)?,
                exact_match: exact_match(examples, &caps),
            })
        }
        None => None,
    };
    Ok(EvalReport {
        split: split.to_string(),
        num_images: examples.len(),
        per_stage,
        beam,
        config_hash: config_hash.to_string(),
    })
}
