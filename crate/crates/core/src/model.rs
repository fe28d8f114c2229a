//! Model dimensions and the full parameter set of the multi-stage decoder.
//!
//! [`Weights<T>`] is generic over its storage so that the same layout holds
//! parameter tensors, their tape handles, gradients and optimizer moments.
//! Stage 0 is the coarse decoder; stages `1..=fine_stages` are the
//! attention-based fine decoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::NUM_RESERVED;

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Attention width; must equal `hidden`.
    pub attention: usize,
    pub feature_dim: usize,
    /// Side of the square feature grid (`grid * grid` regions).
    pub grid: usize,
    pub fine_stages: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fine_stages < 1 {
            return bad("fine_stages must be >= 1".into());
        }
        if self.attention != self.hidden {
            return bad(format!(
                "attention size {} must equal hidden size {}",
                self.attention, self.hidden
            ));
        }
        if self.vocab_size < NUM_RESERVED {
            return bad(format!("vocab_size {} below reserved count", self.vocab_size));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("grid", self.grid),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be > 0"));
            }
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn num_stages(&self) -> usize {
        self.fine_stages + 1
    }

    pub fn lstm_input(&self, stage: usize) -> usize {
        if stage == 0 {
            self.embed_dim + self.feature_dim + self.hidden
        } else {
            self.embed_dim + self.attention + self.hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights<T> {
    /// `[d_in, 4h]`, gate blocks ordered input, forget, output, candidate.
    pub w_input: T,
    /// `[h, 4h]`
    pub w_hidden: T,
    /// `[1, 4h]`
    pub bias: T,
}

/// Region scoring of a fine stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// `[d_v, d_a]`, applied to each region feature.
    pub w_region: T,
    /// `[d_h, d_a]`, applied to the fused hidden state.
    pub w_query: T,
    /// `[d_a, 1]`, reduces a region score vector to one logit.
    pub w_score: T,
    /// `[1, 1]`
    pub b_score: T,
}

/// Affine projection of region features that stage `i` attends over.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueProjection<T> {
    /// `[d_v, d_a]`
    pub w: T,
    /// `[1, d_a]`
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    /// `[d_h, |V|]`
    pub w: T,
    /// `[1, |V|]`
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights<T> {
    pub lstm: LstmWeights<T>,
    /// `None` for the coarse stage.
    pub attention: Option<AttentionWeights<T>>,
    pub value: ValueProjection<T>,
    pub head: HeadWeights<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// `[|V|, d_e]`, shared by every stage.
    pub embedding: T,
    pub stages: Vec<StageWeights<T>>,
}

impl<T> Weights<T> {
    /// Visits every parameter in canonical order with its dotted name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        f("embedding", &self.embedding);
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("stage{i}.lstm.w_input"), &s.lstm.w_input);
            f(&format!("stage{i}.lstm.w_hidden"), &s.lstm.w_hidden);
            f(&format!("stage{i}.lstm.bias"), &s.lstm.bias);
            if let Some(a) = &s.attention {
                f(&format!("stage{i}.attn.w_region"), &a.w_region);
                f(&format!("stage{i}.attn.w_query"), &a.w_query);
                f(&format!("stage{i}.attn.w_score"), &a.w_score);
                f(&format!("stage{i}.attn.b_score"), &a.b_score);
            }
            f(&format!("stage{i}.value.w"), &s.value.w);
            f(&format!("stage{i}.value.b"), &s.value.b);
            f(&format!("stage{i}.head.w"), &s.head.w);
            f(&format!("stage{i}.head.b"), &s.head.b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("embedding", &mut self.embedding);
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("stage{i}.lstm.w_input"), &mut s.lstm.w_input);
            f(&format!("stage{i}.lstm.w_hidden"), &mut s.lstm.w_hidden);
            f(&format!("stage{i}.lstm.bias"), &mut s.lstm.bias);
            if let Some(a) = &mut s.attention {
                f(&format!("stage{i}.attn.w_region"), &mut a.w_region);
                f(&format!("stage{i}.attn.w_query"), &mut a.w_query);
                f(&format!("stage{i}.attn.w_score"), &mut a.w_score);
                f(&format!("stage{i}.attn.b_score"), &mut a.b_score);
            }
            f(&format!("stage{i}.value.w"), &mut s.value.w);
            f(&format!("stage{i}.value.b"), &mut s.value.b);
            f(&format!("stage{i}.head.w"), &mut s.head.w);
            f(&format!("stage{i}.head.b"), &mut s.head.b);
        }
    }

    /// Builds a same-shaped structure by mapping every parameter in canonical order.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<Weights<U>> {
        let embedding = f("embedding", &self.embedding)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let lstm = LstmWeights {
                w_input: f(&format!("stage{i}.lstm.w_input"), &s.lstm.w_input)?,
                w_hidden: f(&format!("stage{i}.lstm.w_hidden"), &s.lstm.w_hidden)?,
                bias: f(&format!("stage{i}.lstm.bias"), &s.lstm.bias)?,
            };
            let attention = match &s.attention {
                Some(a) => Some(AttentionWeights {
                    w_region: f(&format!("stage{i}.attn.w_region"), &a.w_region)?,
                    w_query: f(&format!("stage{i}.attn.w_query"), &a.w_query)?,
                    w_score: f(&format!("stage{i}.attn.w_score"), &a.w_score)?,
                    b_score: f(&format!("stage{i}.attn.b_score"), &a.b_score)?,
                }),
                None => None,
            };
            let value = ValueProjection {
                w: f(&format!("stage{i}.value.w"), &s.value.w)?,
                b: f(&format!("stage{i}.value.b"), &s.value.b)?,
            };
            let head = HeadWeights {
                w: f(&format!("stage{i}.head.w"), &s.head.w)?,
                b: f(&format!("stage{i}.head.b"), &s.head.b)?,
            };
            stages.push(StageWeights {
                lstm,
                attention,
                value,
                head,
            });
        }
        Ok(Weights { embedding, stages })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        self.try_map(|n, t| Ok(f(n, t))).expect("infallible map")
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }

    pub fn flatten(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<*mut T> = Vec::new();
        self.visit_mut(|_, t| out.push(t as *mut T));
        // SAFETY: `visit_mut` yields each field exactly once, so the pointers
        // are distinct and all borrow from `self` for the returned lifetime.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }
}

impl Weights<Tensor> {
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n.to_string(), t.shape().to_vec())));
        out
    }

    pub fn num_params(&self) -> usize {
        self.flatten().iter().map(|t| t.numel()).sum()
    }

    pub fn zeros_like(&self) -> Weights<Tensor> {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn global_norm(&self) -> f64 {
        self.flatten().iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.visit_mut(|_, t| t.scale_in_place(c));
    }

    pub fn add_assign(&mut self, other: &Weights<Tensor>) -> Result<()> {
        for (a, b) in self.flatten_mut().into_iter().zip(other.flatten()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Weights<Tensor>) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|t| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub weights: Weights<Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl ModelParams {
    /// Uniform(-0.08, 0.08) everywhere except the LSTM forget-gate bias, which starts at 1.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, v, da, dv) = (dims.hidden, dims.vocab_size, dims.attention, dims.feature_dim);
        let embedding = uniform(&mut rng, &[v, dims.embed_dim]);
        let mut stages = Vec::with_capacity(dims.num_stages());
        for i in 0..dims.num_stages() {
            let mut bias = uniform(&mut rng, &[1, 4 * h]);
            bias.data_mut()[h..2 * h].fill(FORGET_BIAS);
            let lstm = LstmWeights {
                w_input: uniform(&mut rng, &[dims.lstm_input(i), 4 * h]),
                w_hidden: uniform(&mut rng, &[h, 4 * h]),
                bias,
            };
            let attention = (i > 0).then(|| AttentionWeights {
                w_region: uniform(&mut rng, &[dv, da]),
                w_query: uniform(&mut rng, &[h, da]),
                w_score: uniform(&mut rng, &[da, 1]),
                b_score: uniform(&mut rng, &[1, 1]),
            });
            let value = ValueProjection {
                w: uniform(&mut rng, &[dv, da]),
                b: uniform(&mut rng, &[1, da]),
            };
            let head = HeadWeights {
                w: uniform(&mut rng, &[h, v]),
                b: uniform(&mut rng, &[1, v]),
            };
            stages.push(StageWeights {
                lstm,
                attention,
                value,
                head,
            });
        }
        Ok(ModelParams {
            dims,
            weights: Weights { embedding, stages },
        })
    }

    /// Checks that every tensor has the shape the dimensions imply.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let expected = ModelParams::init(self.dims, 0)?.weights.shapes();
        let actual = self.weights.shapes();
        if expected != actual {
            return Err(Error::Checkpoint(format!(
                "parameter layout does not match model dims: expected {} tensors, got {}",
                expected.len(),
                actual.len()
            )));
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as leaves when `trainable` and constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Weights<Var>> {
        self.weights.try_map(|_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}
