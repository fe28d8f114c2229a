//! Plain-`f64` reference implementation of the multi-stage decoder, written
//! independently of the tape, plus small model/feature factories.

#![allow(dead_code)]

pub mod metric_oracle;

use c2f_caption::attention::SpatialFeatures;
use c2f_caption::model::{ModelDims, ModelParams};
use c2f_caption::tensor::Tensor;
use c2f_caption::vocab::{BOS, EOS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dims(vocab: usize, hidden: usize, max_len: usize) -> ModelDims {
    ModelDims {
        vocab_size: vocab,
        embed_dim: 3,
        hidden,
        attention: hidden,
        feature_dim: 5,
        grid: 2,
        fine_stages: 2,
        max_len,
    }
}

/// A random model with weights stretched by `scale`, so that word
/// distributions are far from uniform.
pub fn model(dims: ModelDims, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(dims, seed).unwrap();
    for t in p.weights.flatten_mut() {
        t.scale_in_place(scale);
    }
    p
}

pub fn features(dims: &ModelDims, seed: u64) -> SpatialFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = dims.grid * dims.grid * dims.feature_dim;
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SpatialFeatures::new(dims.grid, Tensor::new(vec![dims.grid * dims.grid, dims.feature_dim], data).unwrap()).unwrap()
}

/// `x W` for a row vector `x` and a `[in, out]` matrix.
pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row_slice(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Recurrent state of every stage for one image.
#[derive(Clone, Debug)]
pub struct State {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

pub struct Oracle<'a> {
    pub p: &'a ModelParams,
    regions: Vec<Vec<f64>>,
    mean: Vec<f64>,
    /// Projected region values per stage.
    values: Vec<Vec<Vec<f64>>>,
}

/// One step's output: log word distribution and attention map per stage.
pub struct Step {
    pub log_probs: Vec<Vec<f64>>,
    pub alpha: Vec<Option<Vec<f64>>>,
}

impl<'a> Oracle<'a> {
    pub fn new(p: &'a ModelParams, v: &SpatialFeatures) -> Self {
        let regions: Vec<Vec<f64>> = (0..v.num_regions()).map(|n| v.region(n).to_vec()).collect();
        let mut mean = vec![0.0; v.dim()];
        for r in &regions {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / regions.len() as f64;
            }
        }
        let values = p
            .weights
            .stages
            .iter()
            .map(|s| {
                regions
                    .iter()
                    .map(|r| add(&vecmat(r, &s.value.w), s.value.b.data()))
                    .collect()
            })
            .collect();
        Oracle { p, regions, mean, values }
    }

    pub fn initial(&self) -> State {
        let n = self.p.dims.num_stages();
        let h = self.p.dims.hidden;
        State {
            h: vec![vec![0.0; h]; n],
            c: vec![vec![0.0; h]; n],
        }
    }

    fn lstm(&self, stage: usize, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = &self.p.weights.stages[stage].lstm;
        let z = add(&add(&vecmat(x, &w.w_input), &vecmat(h, &w.w_hidden)), w.bias.data());
        let d = h.len();
        let mut h2 = vec![0.0; d];
        let mut c2 = vec![0.0; d];
        for j in 0..d {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[d + j]);
            let o = sigmoid(z[2 * d + j]);
            let g = z[3 * d + j].tanh();
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    fn embed(&self, tok: usize) -> Vec<f64> {
        self.p.weights.embedding.row_slice(tok).to_vec()
    }

    /// Advances all stages; `prev[i]` is stage `i`'s previous token.
    pub fn step(&self, s: &State, prev: &[usize]) -> (Step, State) {
        let n = self.p.dims.num_stages();
        let mut next = State {
            h: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
        };
        let mut log_probs = Vec::new();
        let mut alphas = Vec::new();
        let k = self.regions.len();
        let mut ctx_prev: Vec<f64> = {
            let mut m = vec![0.0; self.p.dims.attention];
            for v in &self.values[0] {
                for (a, b) in m.iter_mut().zip(v) {
                    *a += b / k as f64;
                }
            }
            m
        };
        for i in 0..n {
            let sw = &self.p.weights.stages[i];
            let emb = self.embed(prev[i]);
            let (x, alpha) = match &sw.attention {
                None => ([emb, self.mean.clone(), s.h[n - 1].clone()].concat(), None),
                Some(a) => {
                    let below = next.h[i - 1].clone();
                    let hbar = add(&below, &ctx_prev);
                    let q = vecmat(&hbar, &a.w_query);
                    let scores: Vec<f64> = self
                        .regions
                        .iter()
                        .map(|r| {
                            let key = vecmat(r, &a.w_region);
                            let hidden: Vec<f64> = key.iter().zip(&q).map(|(x, y)| (x + y).tanh()).collect();
                            vecmat(&hidden, &a.w_score)[0] + a.b_score.data()[0]
                        })
                        .collect();
                    let alpha: Vec<f64> = log_softmax(&scores).iter().map(|l| l.exp()).collect();
                    let mut ctx = vec![0.0; self.p.dims.attention];
                    for (w, v) in alpha.iter().zip(&self.values[i]) {
                        for (c, x) in ctx.iter_mut().zip(v) {
                            *c += w * x;
                        }
                    }
                    ctx_prev = ctx.clone();
                    ([emb, ctx, below].concat(), Some(alpha))
                }
            };
            let (h, c) = self.lstm(i, &x, &s.h[i], &s.c[i]);
            let logits = add(&vecmat(&h, &sw.head.w), sw.head.b.data());
            log_probs.push(log_softmax(&logits));
            alphas.push(alpha);
            next.h.push(h);
            next.c.push(c);
        }
        (Step { log_probs, alpha: alphas }, next)
    }

    /// Teacher-forced word distributions `[stage][t][word]` (probabilities).
    pub fn teacher_forced(&self, gold: &[usize]) -> Vec<Vec<Vec<f64>>> {
        let n = self.p.dims.num_stages();
        let mut out = vec![Vec::new(); n];
        let mut s = self.initial();
        for t in 0..gold.len() {
            let prev = if t == 0 { BOS } else { gold[t - 1] };
            let (step, next) = self.step(&s, &vec![prev; n]);
            for (i, lp) in step.log_probs.iter().enumerate() {
                out[i].push(lp.iter().map(|x| x.exp()).collect());
            }
            s = next;
        }
        out
    }

    /// Greedy decoding of every stage; finished stages are fed PAD.
    /// Returns `[stage]` token lists and per-token log probabilities.
    pub fn greedy(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        let n = self.p.dims.num_stages();
        let mut out = vec![(Vec::new(), Vec::new()); n];
        let mut done = vec![false; n];
        let mut prev = vec![BOS; n];
        let mut s = self.initial();
        for _ in 0..self.p.dims.max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let (step, next) = self.step(&s, &prev);
            for i in 0..n {
                if done[i] {
                    prev[i] = PAD;
                    continue;
                }
                let tok = argmax(&step.log_probs[i]);
                out[i].0.push(tok);
                out[i].1.push(step.log_probs[i][tok]);
                if tok == EOS {
                    done[i] = true;
                    prev[i] = PAD;
                } else {
                    prev[i] = tok;
                }
            }
            s = next;
        }
        out
    }

    /// Score of forcing the final stage to emit `tokens` while lower stages
    /// decode greedily: the sum of final-stage log probabilities.
    pub fn forced_final_score(&self, tokens: &[usize]) -> f64 {
        let n = self.p.dims.num_stages();
        let last = n - 1;
        let mut prev = vec![BOS; n];
        let mut done = vec![false; last];
        let mut s = self.initial();
        let mut score = 0.0;
        for &tok in tokens {
            let (step, next) = self.step(&s, &prev);
            score += step.log_probs[last][tok];
            for i in 0..last {
                if done[i] {
                    prev[i] = PAD;
                    continue;
                }
                let g = argmax(&step.log_probs[i]);
                if g == EOS {
                    done[i] = true;
                    prev[i] = PAD;
                } else {
                    prev[i] = g;
                }
            }
            prev[last] = tok;
            s = next;
        }
        score
    }
}

/// Every final-stage sequence of length <= T: those ending in EOS, plus the
/// EOS-free ones of exactly length T.
pub fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for t in 0..max_len {
        let mut grown = Vec::new();
        for prefix in &frontier {
            for tok in 0..vocab {
                let mut s = prefix.clone();
                s.push(tok);
                if tok == EOS || t + 1 == max_len {
                    out.push(s);
                } else {
                    grown.push(s);
                }
            }
        }
        frontier = grown;
    }
    out
}
