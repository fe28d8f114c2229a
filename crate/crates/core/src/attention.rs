//! Stacked spatial attention of the fine stages.
//!
//! Region features of a batch are stored as one `[B * N, d_v]` matrix, with
//! the `N = k * k` regions of item `b` in rows `b * N .. (b + 1) * N`.
//! Attention maps are `[B, N]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionWeights, ValueProjection};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature grid of one image: `k * k` region vectors of width `d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    grid: usize,
    regions: Tensor,
}

impl SpatialFeatures {
    pub fn new(grid: usize, regions: Tensor) -> Result<Self> {
        if grid == 0 || regions.shape().len() != 2 || regions.rows() != grid * grid {
            return Err(Error::shape("spatial features", &[grid * grid], regions.shape()));
        }
        if !regions.is_finite() {
            return Err(Error::NonFinite { op: "spatial features" });
        }
        Ok(SpatialFeatures { grid, regions })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn num_regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn dim(&self) -> usize {
        self.regions.cols()
    }

    pub fn region(&self, n: usize) -> &[f64] {
        self.regions.row_slice(n)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.regions
    }
}

/// Stacks the regions of several images into one `[B * N, d_v]` tensor.
pub fn stack_features(items: &[&SpatialFeatures]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::Empty)?;
    let (n, d) = (first.num_regions(), first.dim());
    let mut data = Vec::with_capacity(items.len() * n * d);
    for f in items {
        if f.num_regions() != n || f.dim() != d {
            return Err(Error::shape("stack_features", &[n, d], &[f.num_regions(), f.dim()]));
        }
        data.extend_from_slice(f.regions.data());
    }
    Ok(Tensor::from_parts(vec![items.len() * n, d], data))
}

/// A probability vector over the `k * k` regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    probs: Vec<f64>,
}

pub const SIMPLEX_TOL: f64 = 1e-9;

impl AttentionMap {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty);
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("attention weights must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("attention weights sum to {total}")));
        }
        Ok(AttentionMap { probs })
    }

    pub fn uniform(n: usize) -> Self {
        AttentionMap {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest weight (first on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// The weights as `k` rows of `k`.
    pub fn grid(&self, k: usize) -> Vec<Vec<f64>> {
        self.probs.chunks(k).map(<[f64]>::to_vec).collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `[B, N]` uniform weights, the attention fed to the first fine stage.
pub fn uniform_weights(batch: usize, regions: usize) -> Tensor {
    Tensor::full(&[batch, regions], 1.0 / regions as f64)
}

/// Per-region values `V_n W + b`, `[B * N, d_a]`.
pub fn project_values(tape: &mut Tape, v: Var, p: &ValueProjection<Var>) -> Result<Var> {
    let z = tape.matmul(v, p.w)?;
    tape.add(z, p.b)
}

/// Per-region attention keys `V_n W_va`, `[B * N, d_a]`. Independent of time, so computed once per rollout.
pub fn project_regions(tape: &mut Tape, v: Var, a: &AttentionWeights<Var>) -> Result<Var> {
    tape.matmul(v, a.w_region)
}

/// `h_prev + sum_n alpha_prev[n] * values_prev[n]`, the hidden state fused with
/// the preceding stage's attended values.
pub fn fuse_hidden(tape: &mut Tape, h_prev: Var, alpha_prev: Var, values_prev: Var) -> Result<Var> {
    let ctx = attended_context(tape, alpha_prev, values_prev)?;
    fuse_with_context(tape, h_prev, ctx)
}

/// [`fuse_hidden`] when the attended values are already at hand.
pub fn fuse_with_context(tape: &mut Tape, h_prev: Var, context_prev: Var) -> Result<Var> {
    let (h, c) = (tape.value(h_prev), tape.value(context_prev));
    if h.shape() != c.shape() {
        return Err(Error::shape("fuse_hidden", h.shape(), c.shape()));
    }
    tape.add(h_prev, context_prev)
}

/// Attention weights `softmax_n(w . tanh(K_n + h_bar W_ha) + b)`, `[B, N]`.
pub fn attend(tape: &mut Tape, keys: Var, h_bar: Var, a: &AttentionWeights<Var>) -> Result<Var> {
    let batch = tape.value(h_bar).rows();
    let rows = tape.value(keys).rows();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape("attend", tape.value(keys).shape(), tape.value(h_bar).shape()));
    }
    let n = rows / batch;
    let q = tape.matmul(h_bar, a.w_query)?;
    let q = if n == 1 {
        q
    } else {
        let index: Vec<usize> = (0..rows).map(|r| r / n).collect();
        tape.index_select(q, &index)?
    };
    let s = tape.add(keys, q)?;
    let s = tape.tanh(s)?;
    let logits = tape.matmul(s, a.w_score)?;
    let logits = tape.add(logits, a.b_score)?;
    let logits = tape.reshape(logits, batch, n)?;
    tape.softmax(logits)
}

/// `sum_n alpha[n] * values[n]`, `[B, d_a]`.
pub fn attended_context(tape: &mut Tape, alpha: Var, values: Var) -> Result<Var> {
    tape.group_weighted_sum(alpha, values)
}

/// Splits a `[B, N]` weight tensor into per-item maps.
pub fn maps_from_tensor(t: &Tensor) -> Vec<AttentionMap> {
    (0..t.rows())
        .map(|r| AttentionMap {
            probs: t.row_slice(r).to_vec(),
        })
        .collect()
}
