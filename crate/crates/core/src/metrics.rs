//! Sentence-level BLEU-n and CIDEr.
//!
//! CIDEr here is the plain consensus metric: TF-IDF weighted n-gram vectors
//! (n = 1..4) compared by cosine similarity, averaged over references and
//! then over n. It applies no length penalty and no count clipping. Scores
//! are raw, in `[0, 1]`. All n-gram tables are ordered maps so results do not
//! depend on hash iteration order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{strip_reserved, TokenId};

pub const CIDER_MAX_N: usize = 4;

type Counts = BTreeMap<Vec<TokenId>, usize>;

fn ngram_counts(tokens: &[TokenId], n: usize) -> Counts {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// BLEU with clipped n-gram precisions for `n = 1..=n_max`, geometric mean and
/// brevity penalty against the closest reference length (shorter on ties).
/// Unsmoothed: any zero precision gives 0.
pub fn bleu_n(candidate: &[TokenId], refs: &[Vec<TokenId>], n_max: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("bleu needs at least one reference".into()));
    }
    if !(1..=4).contains(&n_max) {
        return Err(Error::InvalidArgument(format!("bleu order {n_max} outside 1..=4")));
    }
    let cand = strip_reserved(candidate);
    let refs: Vec<Vec<TokenId>> = refs.iter().map(|r| strip_reserved(r)).collect();
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut max_ref = Counts::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("refs non-empty");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n_max as f64).exp())
}

/// A sparse TF-IDF vector for one n-gram order, with its norm.
#[derive(Clone, Debug, Default)]
struct Weighted {
    weights: BTreeMap<Vec<TokenId>, f64>,
    norm: f64,
}

impl Weighted {
    fn cosine(&self, other: &Weighted) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let (small, large) = if self.weights.len() <= other.weights.len() {
            (self, other)
        } else {
            (other, self)
        };
        let dot: f64 = small
            .weights
            .iter()
            .filter_map(|(g, w)| large.weights.get(g).map(|v| w * v))
            .sum();
        dot / (self.norm * other.norm)
    }
}

#[derive(Clone, Debug)]
struct ImageRefs {
    refs: Vec<Vec<TokenId>>,
    vectors: Vec<[Weighted; CIDER_MAX_N]>,
}

/// References of every image plus the document frequencies CIDEr weights by.
/// The document frequency of an n-gram is the number of images whose
/// reference set contains it.
#[derive(Clone, Debug)]
pub struct ReferenceCorpus {
    images: BTreeMap<u64, ImageRefs>,
    df: [Counts; CIDER_MAX_N],
    log_n: f64,
}

impl ReferenceCorpus {
    pub fn new<I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, Vec<Vec<TokenId>>)>,
    {
        let mut raw: BTreeMap<u64, Vec<Vec<TokenId>>> = BTreeMap::new();
        for (id, refs) in images {
            if refs.is_empty() {
                return Err(Error::InvalidArgument(format!("image {id} has no references")));
            }
            let refs = refs.iter().map(|r| strip_reserved(r)).collect();
            if raw.insert(id, refs).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate image id {id}")));
            }
        }
        if raw.is_empty() {
            return Err(Error::Empty);
        }
        let mut df: [Counts; CIDER_MAX_N] = Default::default();
        for refs in raw.values() {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen = Counts::new();
                for r in refs {
                    seen.extend(ngram_counts(r, n + 1));
                }
                for g in seen.into_keys() {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        let mut corpus = ReferenceCorpus {
            images: BTreeMap::new(),
            df,
            log_n: (raw.len() as f64).ln(),
        };
        for (id, refs) in raw {
            let vectors = refs.iter().map(|r| corpus.vectorize(r)).collect();
            corpus.images.insert(id, ImageRefs { refs, vectors });
        }
        Ok(corpus)
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn refs(&self, image: u64) -> Result<&[Vec<TokenId>]> {
        self.images
            .get(&image)
            .map(|i| i.refs.as_slice())
            .ok_or(Error::UnknownScene(image))
    }

    pub fn document_frequency(&self, ngram: &[TokenId]) -> usize {
        match ngram.len() {
            1..=CIDER_MAX_N => self.df[ngram.len() - 1].get(ngram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, ngram: &[TokenId]) -> f64 {
        self.log_n - (self.document_frequency(ngram).max(1) as f64).ln()
    }

    fn vectorize(&self, tokens: &[TokenId]) -> [Weighted; CIDER_MAX_N] {
        std::array::from_fn(|n| {
            let mut weights = BTreeMap::new();
            let mut sq = 0.0;
            for (g, c) in ngram_counts(tokens, n + 1) {
                let w = c as f64 * self.idf(&g);
                sq += w * w;
                weights.insert(g, w);
            }
            Weighted { weights, norm: sq.sqrt() }
        })
    }

    fn score_vectors(&self, cand: &[Weighted; CIDER_MAX_N], refs: &[[Weighted; CIDER_MAX_N]]) -> f64 {
        let mut total = 0.0;
        for n in 0..CIDER_MAX_N {
            let s: f64 = refs.iter().map(|r| cand[n].cosine(&r[n])).sum();
            total += s / refs.len() as f64;
        }
        total / CIDER_MAX_N as f64
    }

    /// CIDEr of `candidate` against an arbitrary reference list, weighted by this corpus.
    pub fn cider(&self, candidate: &[TokenId], refs: &[Vec<TokenId>]) -> Result<f64> {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("cider needs at least one reference".into()));
        }
        let cand = strip_reserved(candidate);
        if cand.is_empty() {
            return Ok(0.0);
        }
        let cv = self.vectorize(&cand);
        let rv: Vec<_> = refs.iter().map(|r| self.vectorize(&strip_reserved(r))).collect();
        Ok(self.score_vectors(&cv, &rv))
    }

    /// CIDEr of `candidate` against the stored references of `image`.
    pub fn cider_for(&self, image: u64, candidate: &[TokenId]) -> Result<f64> {
        let entry = self.images.get(&image).ok_or(Error::UnknownScene(image))?;
        let cand = strip_reserved(candidate);
        if cand.is_empty() {
            return Ok(0.0);
        }
        Ok(self.score_vectors(&self.vectorize(&cand), &entry.vectors))
    }

    pub fn reward_for(&self, image: u64, candidate: &[TokenId], metric: Metric) -> Result<f64> {
        match metric {
            Metric::Cider => self.cider_for(image, candidate),
            Metric::Bleu4 => bleu_n(candidate, self.refs(image)?, 4),
            Metric::Mix { cider, bleu4 } => {
                Ok(cider * self.cider_for(image, candidate)? + bleu4 * bleu_n(candidate, self.refs(image)?, 4)?)
            }
        }
    }
}

/// CIDEr of `candidate` against `refs`.
pub fn cider(candidate: &[TokenId], refs: &[Vec<TokenId>], corpus: &ReferenceCorpus) -> Result<f64> {
    corpus.cider(candidate, refs)
}

/// Reward metric of the RL phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Cider,
    Bleu4,
    /// Weighted sum of CIDEr and BLEU-4.
    Mix { cider: f64, bleu4: f64 },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Cider
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cider" => Ok(Metric::Cider),
            "bleu4" => Ok(Metric::Bleu4),
            "mix" => Ok(Metric::Mix { cider: 0.5, bleu4: 0.5 }),
            other => Err(Error::UnknownMetric(other.to_string())),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Cider => f.write_str("cider"),
            Metric::Bleu4 => f.write_str("bleu4"),
            Metric::Mix { .. } => f.write_str("mix"),
        }
    }
}

pub fn reward(candidate: &[TokenId], refs: &[Vec<TokenId>], corpus: &ReferenceCorpus, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Cider => corpus.cider(candidate, refs),
        Metric::Bleu4 => bleu_n(candidate, refs, 4),
        Metric::Mix { cider, bleu4 } => {
            Ok(cider * corpus.cider(candidate, refs)? + bleu4 * bleu_n(candidate, refs, 4)?)
        }
    }
}

/// Mean sentence-level scores over a set of images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
}

/// Averages BLEU-1..4 and CIDEr of `(image, candidate)` pairs.
pub fn score_all(corpus: &ReferenceCorpus, candidates: &[(u64, Vec<TokenId>)]) -> Result<Scores> {
    if candidates.is_empty() {
        return Err(Error::Empty);
    }
    let mut s = Scores::default();
    for (id, cand) in candidates {
        let refs = corpus.refs(*id)?;
        s.bleu1 += bleu_n(cand, refs, 1)?;
        s.bleu2 += bleu_n(cand, refs, 2)?;
        s.bleu3 += bleu_n(cand, refs, 3)?;
        s.bleu4 += bleu_n(cand, refs, 4)?;
        s.cider += corpus.cider_for(*id, cand)?;
    }
    let n = candidates.len() as f64;
    s.bleu1 /= n;
    s.bleu2 /= n;
    s.bleu3 /= n;
    s.bleu4 /= n;
    s.cider /= n;
    Ok(s)
}
