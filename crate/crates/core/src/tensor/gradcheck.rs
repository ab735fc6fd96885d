//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, flat element) of the worst relative error
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

/// Relative error with a denominator floor, so gradients that are zero up to
/// rounding compare absolutely against `floor`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const DENOM_FLOOR: f64 = 1e-8;

/// Entries far below the largest gradient are judged against this fraction
/// of it. Central differences carry rounding noise of order `ε·|f|/h`, so a
/// gradient that is exactly zero (e.g. an attention key bias) can never meet
/// a purely relative test; anything above the floor still is one.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Gradient check of a scalar function of one tensor.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// Gradient check of a scalar function of several tensors; every input is
/// perturbed element by element.
pub fn grad_check_many<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for r in grad_check_inputs(f, inputs, eps)? {
        total.merge(&r);
    }
    Ok(total)
}

/// Like [`grad_check_many`] but reports each input separately. The
/// denominator floor is shared, so the reports merge into the combined one.
pub fn grad_check_inputs<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
) -> Result<Vec<GradCheckReport>, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::Contract(
                "grad_check needs a scalar function".into(),
            ));
        }
        Ok(g.value(out).item().as_f64())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut pairs = Vec::new();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf gradient").to_vec();
        for (j, a) in analytic.iter().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = T::lit(orig.as_f64() + eps);
            let fp = eval(&work)?;
            work[k].data_mut()[j] = T::lit(orig.as_f64() - eps);
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;
            pairs.push(((k, j), a.as_f64(), (fp - fm) / (2.0 * eps)));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.2.abs()));
    let floor = DENOM_FLOOR.max(SCALE_FLOOR * scale);
    let mut reports: Vec<GradCheckReport> = (0..inputs.len())
        .map(|k| GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: (k, 0),
            checked: 0,
        })
        .collect();
    for (at, a, n) in pairs {
        reports[at.0].merge(&GradCheckReport {
            max_rel_error: rel_error(a, n, floor),
            max_abs_error: (a - n).abs(),
            worst: at,
            checked: 1,
        });
    }
    Ok(reports)
}
