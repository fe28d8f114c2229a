//! Central finite-difference checking of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is (near) zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar program `f` against central
/// differences with the given `step`, for every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check step must be > 0, got {step}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check tol must be > 0, got {tol}")));
    }

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..analytic.numel() {
            let orig = work[pi].1.data()[j];
            work[pi].1.data_mut()[j] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[pi].1.data_mut()[j] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[pi].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        reports.push(ParamReport {
            name: params[pi].0.clone(),
            numel: analytic.numel(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let passed = reports.iter().all(|r| r.max_rel_error < tol);
    Ok(GradCheckReport {
        step,
        tol,
        params: reports,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::OpKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::row(&[0.3, -1.2, 2.0]);
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, -0.5]).unwrap();
        let report = grad_check(
            |tape, v| tape.matmul(v[0], v[1]),
            &[("w".into(), w), ("x".into(), x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let err = grad_check(|t, v| t.sum(v[0]), &[("x".into(), Tensor::row(&[1.0]))], 0.0, 1e-4);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rejects_vector_valued_program() {
        let err = grad_check(
            |t, v| t.tanh(v[0]),
            &[("x".into(), Tensor::row(&[1.0, 2.0]))],
            1e-5,
            1e-4,
        );
        assert!(matches!(err, Err(Error::NonScalarLoss(_))));
    }

    /// Every differentiable primitive, in isolation, at 10 random points.
    /// Each op output is contracted with a fixed random weight so the scalar
    /// depends on every output entry.
    #[test]
    fn every_op_kind_passes_at_random_points() {
        let kinds = [
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Tanh,
            OpKind::Sigmoid,
            OpKind::Softmax,
            OpKind::LogSoftmax,
            OpKind::Concat,
            OpKind::Mean,
            OpKind::IndexSelect(vec![2, 0, 2]),
            OpKind::Log,
            OpKind::Sum,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in &kinds {
            for _ in 0..10 {
                let (a, b) = match kind {
                    OpKind::MatMul => (random(&mut rng, 3, 4), Some(random(&mut rng, 4, 2))),
                    OpKind::Add | OpKind::Mul | OpKind::Concat => {
                        (random(&mut rng, 3, 4), Some(random(&mut rng, 3, 4)))
                    }
                    OpKind::Log => {
                        let t = random(&mut rng, 3, 4);
                        let pos = t.data().iter().map(|x| x.abs() + 0.5).collect();
                        (Tensor::matrix(3, 4, pos).unwrap(), None)
                    }
                    _ => (random(&mut rng, 3, 4), None),
                };
                let mut params = vec![("a".to_string(), a)];
                if let Some(b) = b {
                    params.push(("b".to_string(), b));
                }
                let probe = {
                    let mut tape = Tape::new();
                    let vs: Vec<_> = params.iter().map(|(_, t)| tape.constant(t.clone()).unwrap()).collect();
                    let out = tape.apply(kind, &vs).unwrap();
                    let s = tape.value(out).shape().to_vec();
                    random(&mut rng, s[0], s[1])
                };
                let report = grad_check(
                    |tape, v| {
                        let out = tape.apply(kind, v)?;
                        let w = tape.constant(probe.clone())?;
                        let weighted = tape.mul(out, w)?;
                        tape.sum(weighted)
                    },
                    &params,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed, "{} failed: {report:?}", kind.name());
            }
        }
    }

    #[test]
    fn extra_primitives_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 2, 3);
        let v = random(&mut rng, 6, 4);
        let probe = random(&mut rng, 2, 4);
        let report = grad_check(
            |tape, p| {
                let a = tape.softmax(p[0])?;
                let s = tape.group_weighted_sum(a, p[1])?;
                let m = tape.group_mean(p[1], 3)?;
                let s = tape.add(s, m)?;
                let sl = tape.slice_cols(s, 1, 2)?;
                let r = tape.reshape(sl, 1, 4)?;
                let r = tape.scale(r, 1.7)?;
                let w = tape.constant(probe.clone())?;
                let w = tape.reshape(w, 4, 2)?;
                let y = tape.matmul(r, w)?;
                let lp = tape.log_softmax(y)?;
                let pk = tape.pick(lp, &[1])?;
                tape.sum(pk)
            },
            &[("w".into(), w), ("v".into(), v)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
