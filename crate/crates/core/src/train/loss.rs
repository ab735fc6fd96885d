use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Operand order of the distillation divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(student ‖ teacher)`
    #[default]
    StudentFirst,
    /// `KL(teacher ‖ student)`, the usual distillation direction
    TeacherFirst,
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var, TensorError> {
    if g.shape(x_hat) != g.shape(x) {
        return Err(TensorError::Shape {
            op: "l1_loss",
            lhs: g.shape(x_hat).to_vec(),
            rhs: g.shape(x).to_vec(),
        });
    }
    let d = g.sub(x_hat, x)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `KL(softmax(p) ‖ softmax(q))` with each sample flattened to one
/// distribution, averaged over the batch (leading axis).
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var, TensorError> {
    if g.shape(p) != g.shape(q) {
        return Err(TensorError::Shape {
            op: "kl_divergence",
            lhs: g.shape(p).to_vec(),
            rhs: g.shape(q).to_vec(),
        });
    }
    let batch = g.shape(p)[0];
    let n = g.value(p).numel() / batch;
    let p = g.reshape(p, &[batch, n])?;
    let q = g.reshape(q, &[batch, n])?;
    let lp = g.log_softmax(p, 1)?;
    let lq = g.log_softmax(q, 1)?;
    let pp = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(pp, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, T::lit(1.0 / batch as f64)))
}

/// Handles of the distillation objective.
#[derive(Debug, Clone, Copy)]
pub struct KdTerms {
    pub total: Var,
    pub l1: Var,
    /// sum of both feature divergences
    pub kl: Var,
}

/// `L1 + β·(KL(z_C) + KL(ẑ_S))`. `student` holds the graph handles of
/// `(z_C, ẑ_S)`; the teacher features enter as constants.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    x_hat: Var,
    x: Var,
    student: (Var, Var),
    teacher: (&Tensor<T>, &Tensor<T>),
    beta: f64,
    order: KlOrder,
) -> Result<KdTerms, TensorError> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(TensorError::Config(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    let l1 = l1_loss(g, x_hat, x)?;
    let tc = g.constant(teacher.0.clone());
    let ts = g.constant(teacher.1.clone());
    let (kc, ks) = match order {
        KlOrder::StudentFirst => (
            kl_divergence(g, student.0, tc)?,
            kl_divergence(g, student.1, ts)?,
        ),
        KlOrder::TeacherFirst => (
            kl_divergence(g, tc, student.0)?,
            kl_divergence(g, ts, student.1)?,
        ),
    };
    let kl = g.add(kc, ks)?;
    let weighted = g.scale(kl, T::lit(beta));
    let total = g.add(l1, weighted)?;
    Ok(KdTerms { total, l1, kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.constant(Tensor::from_f64(vec![2, 2], &[0.6, 0.7, 0.8, 0.9]).unwrap());
        let same = l1_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let half = l1_loss(&mut g, y, x).unwrap();
        assert!((g.value(half).item() - 0.5).abs() < 1e-15);
        let bad = g.constant(Tensor::zeros(vec![4]));
        assert!(l1_loss(&mut g, x, bad).is_err());
    }

    #[test]
    fn two_element_kl_matches_formula() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap());
        let t = g.constant(Tensor::from_f64(vec![1, 2], &[2.0, 1.0]).unwrap());
        let kl = kl_divergence(&mut g, s, t).unwrap();
        let sm = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        };
        let (p, q) = (sm(1.0, 2.0), sm(2.0, 1.0));
        let expect = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert!((g.value(kl).item() - expect).abs() < 1e-14);
    }
}
