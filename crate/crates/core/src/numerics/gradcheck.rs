//! Central finite-difference gradient checks.

use serde::Serialize;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale;
/// a relative error is meaningless for a gradient that is numerically zero.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Number of coordinates compared.
    pub coordinates: usize,
}

impl GradCheckReport {
    fn new(op_name: &str, max_rel_error: f64, tolerance: f64, coordinates: usize) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
            coordinates,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares an analytic gradient of the scalar function `f` at `point`
/// against central differences.
pub fn compare_gradient(
    op_name: &str,
    point: &[f64],
    analytic: &[f64],
    tolerance: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch {
            op: "compare_gradient",
            lhs: vec![point.len()],
            rhs: vec![analytic.len()],
        });
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{op_name} analytic gradient")));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let plus = f(&x)?;
        x[i] = orig - FD_STEP;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("{op_name} at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(GradCheckReport::new(op_name, worst, tolerance, x.len()))
}

/// Deterministic projection weights that turn a tensor output into a scalar
/// objective `sum(w * out)`.
fn projection(len: usize) -> Vec<f64> {
    (0..len).map(|i| 0.5 + ((i as f64) * 1.618_033_988_75).sin()).collect()
}

/// Checks the gradient of `op` with respect to every element of `inputs`.
/// `op` records its computation on a fresh tape, starting from the given
/// leaf variables.
pub fn grad_check<F>(op_name: &str, inputs: &[Tensor], tolerance: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        tape.value(out).ensure_finite(op_name)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(inputs)?;
    let weights = projection(tape.value(out).len());
    let grads = tape.backward_seeded(out, Tensor::new(tape.value(out).shape().to_vec(), weights.clone())?);
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let objective = |flat: &[f64]| -> Result<f64> {
        let mut offset = 0;
        let mut values = Vec::with_capacity(inputs.len());
        for t in inputs {
            values.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + t.len()].to_vec())?);
            offset += t.len();
        }
        let (tape, _, out) = run(&values)?;
        Ok(tape.value(out).data().iter().zip(&weights).map(|(o, w)| o * w).sum())
    };
    compare_gradient(op_name, &point, &analytic, tolerance, objective)
}
