//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct InputGradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
}

impl InputGradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputGradReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of the scalar function `f` at `points` with
/// central differences of step `eps`.
///
/// `f` receives fresh leaves for every evaluation and must be deterministic.
pub fn finite_difference_check<F>(
    f: F,
    points: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::NotScalar(tape.value(out).shape().to_vec()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut work = points.to_vec();
    let mut inputs = Vec::with_capacity(points.len());
    for (idx, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; points[idx].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..points[idx].numel() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let rel_err = analytic.iter().zip(&numeric).map(|(&a, &n)| rel_err(a, n)).collect();
        inputs.push(InputGradReport {
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = inputs.iter().map(InputGradReport::max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        inputs,
        max_rel_err,
        tolerance: tol,
        passed: max_rel_err <= tol,
    })
}
