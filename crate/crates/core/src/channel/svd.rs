//! Complex singular value decomposition by one-sided (Hestenes) Jacobi
//! rotations.

use num_complex::Complex;

use super::ComplexMatrix;
use crate::error::ChannelError;
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// `H = U · diag(S) · Vᴴ` with unitary `U` (`n_rx × n_rx`), unitary `V`
/// (`n_tx × n_tx`) and `S` sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple<T> {
    pub u: ComplexMatrix<T>,
    pub s: Vec<T>,
    pub v: ComplexMatrix<T>,
}

impl<T: Scalar> SvdTriple<T> {
    /// `U · Σ · Vᴴ` with a rectangular `Σ`.
    pub fn reconstruct(&self) -> ComplexMatrix<T> {
        let sigma = ComplexMatrix::diag(self.u.rows(), self.v.rows(), &self.s);
        self.u
            .matmul(&sigma)
            .and_then(|us| us.matmul(&self.v.conj_transpose()))
            .expect("svd factors conform")
    }
}

/// Column-major working copy.
struct Columns<T> {
    rows: usize,
    cols: Vec<Vec<Complex<T>>>,
}

impl<T: Scalar> Columns<T> {
    fn from_matrix(m: &ComplexMatrix<T>) -> Self {
        Self {
            rows: m.rows(),
            cols: (0..m.cols())
                .map(|j| (0..m.rows()).map(|i| m.get(i, j)).collect())
                .collect(),
        }
    }

    fn identity(n: usize) -> Self {
        Self::from_matrix(&ComplexMatrix::identity(n))
    }

    fn to_matrix(&self) -> ComplexMatrix<T> {
        ComplexMatrix::from_fn(self.rows, self.cols.len(), |i, j| self.cols[j][i])
    }

    /// Applies the column transform `(p, q) ← (c·p − s·q̃, s·p + c·q̃)` with
    /// `q̃ = conj(phase)·q`.
    fn rotate(&mut self, p: usize, q: usize, c: T, s: T, phase: Complex<T>) {
        let (lo, hi) = self.cols.split_at_mut(q);
        let (cp, cq) = (&mut lo[p], &mut hi[0]);
        let ph = phase.conj();
        for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
            let ap = *a;
            let aq = *b * ph;
            *a = ap * c - aq * s;
            *b = ap * s + aq * c;
        }
    }
}

fn norm_sqr<T: Scalar>(v: &[Complex<T>]) -> T {
    v.iter().map(|z| z.norm_sqr()).sum()
}

fn inner<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter()
        .zip(b)
        .fold(Complex::new(T::zero(), T::zero()), |acc, (x, y)| {
            acc + x.conj() * y
        })
}

/// SVD of a matrix with at least as many rows as columns.
fn svd_tall<T: Scalar>(h: &ComplexMatrix<T>) -> Result<SvdTriple<T>, ChannelError> {
    let (m, n) = h.dims();
    let mut a = Columns::from_matrix(h);
    let mut v = Columns::identity(n);
    let tol = T::epsilon() * T::from_usize(m).unwrap();

    let mut converged = false;
    let mut residual = T::zero();
    for _ in 0..MAX_SWEEPS {
        residual = T::zero();
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norm_sqr(&a.cols[p]);
                let beta = norm_sqr(&a.cols[q]);
                let gamma = inner(&a.cols[p], &a.cols[q]);
                let g = gamma.norm();
                let scale = (alpha * beta).sqrt();
                if g == T::zero() || g <= tol * scale {
                    continue;
                }
                residual = residual.max(g / scale);
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (g + g);
                let sign = if zeta >= T::zero() {
                    T::one()
                } else {
                    -T::one()
                };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                a.rotate(p, q, c, s, phase);
                v.rotate(p, q, c, s, phase);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ChannelError::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: residual.as_f64(),
        });
    }

    let norms: Vec<T> = a.cols.iter().map(|c| norm_sqr(c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let s: Vec<T> = order.iter().map(|&j| norms[j]).collect();
    let v_sorted = Columns {
        rows: n,
        cols: order.iter().map(|&j| v.cols[j].clone()).collect(),
    };
    let s_max = s.first().copied().unwrap_or_else(T::zero);
    let floor = s_max * T::epsilon() * T::from_usize(m.max(n) * 8).unwrap();
    let mut u_cols: Vec<Vec<Complex<T>>> = Vec::with_capacity(m);
    for (k, &j) in order.iter().enumerate() {
        if s[k] <= floor || s[k] == T::zero() {
            break;
        }
        let inv = T::one() / s[k];
        u_cols.push(a.cols[j].iter().map(|z| z * inv).collect());
    }
    complete_basis(&mut u_cols, m);

    Ok(SvdTriple {
        u: Columns {
            rows: m,
            cols: u_cols,
        }
        .to_matrix(),
        s,
        v: v_sorted.to_matrix(),
    })
}

/// Extends orthonormal columns to a full basis of `C^m` by Gram–Schmidt on
/// the standard basis vectors.
fn complete_basis<T: Scalar>(cols: &mut Vec<Vec<Complex<T>>>, m: usize) {
    let zero = Complex::new(T::zero(), T::zero());
    let mut k = 0;
    while cols.len() < m && k < m {
        let mut cand = vec![zero; m];
        cand[k] = Complex::new(T::one(), T::zero());
        for _ in 0..2 {
            for q in cols.iter() {
                let proj = inner(q, &cand);
                for (c, &qv) in cand.iter_mut().zip(q) {
                    *c = *c - qv * proj;
                }
            }
        }
        let nrm = norm_sqr(&cand).sqrt();
        if nrm > T::lit(0.1) {
            let inv = T::one() / nrm;
            cols.push(cand.into_iter().map(|z| z * inv).collect());
        }
        k += 1;
    }
}

/// Rotates each column pair so the largest-magnitude entry of every column
/// of `V` is real and positive.
fn fix_phases<T: Scalar>(t: &mut SvdTriple<T>) {
    let paired = t.s.len();
    for j in 0..t.v.cols() {
        let mut best = 0;
        let mut best_mag = T::neg_infinity();
        for i in 0..t.v.rows() {
            let mag = t.v.get(i, j).norm_sqr();
            if mag > best_mag {
                best_mag = mag;
                best = i;
            }
        }
        let pivot = t.v.get(best, j);
        let mag = pivot.norm();
        if mag == T::zero() {
            continue;
        }
        let rot = pivot.conj() / mag;
        for i in 0..t.v.rows() {
            let z = t.v.get(i, j) * rot;
            t.v.set(i, j, z);
        }
        t.v.set(best, j, Complex::new(mag, T::zero()));
        if j < paired {
            for i in 0..t.u.rows() {
                let z = t.u.get(i, j) * rot;
                t.u.set(i, j, z);
            }
        }
    }
}

/// Full SVD with descending singular values and the phase convention of
/// [`fix_phases`].
pub fn svd<T: Scalar>(h: &ComplexMatrix<T>) -> Result<SvdTriple<T>, ChannelError> {
    if !h.is_finite() {
        return Err(ChannelError::Degenerate("svd input has non-finite entries"));
    }
    let mut out = if h.rows() >= h.cols() {
        svd_tall(h)?
    } else {
        let t = svd_tall(&h.conj_transpose())?;
        SvdTriple {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_phases(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real(rows: usize, cols: usize, vals: &[f64]) -> ComplexMatrix<f64> {
        ComplexMatrix::new(rows, cols, vals.to_vec(), vec![0.0; vals.len()]).unwrap()
    }

    fn check(h: &ComplexMatrix<f64>) -> SvdTriple<f64> {
        let t = svd(h).unwrap();
        let uu = t.u.conj_transpose().matmul(&t.u).unwrap();
        let vv = t.v.conj_transpose().matmul(&t.v).unwrap();
        assert!(uu.distance_from_identity() < 1e-10);
        assert!(vv.distance_from_identity() < 1e-10);
        assert!(t.s.windows(2).all(|w| w[0] >= w[1]));
        let res = t.reconstruct().sub(h).unwrap().frobenius();
        assert!(res <= 1e-10 * h.frobenius().max(1.0), "residual {res}");
        t
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let t = check(&ComplexMatrix::identity(2));
        assert_eq!(t.s, vec![1.0, 1.0]);
    }

    #[test]
    fn diagonal_sorted_descending() {
        let t = check(&real(2, 2, &[3.0, 0.0, 0.0, 1.0]));
        assert!((t.s[0] - 3.0).abs() < 1e-14 && (t.s[1] - 1.0).abs() < 1e-14);
        let t = check(&real(2, 2, &[1.0, 0.0, 0.0, 3.0]));
        assert!((t.s[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn antidiagonal() {
        let t = check(&real(2, 2, &[0.0, 2.0, 1.0, 0.0]));
        assert!((t.s[0] - 2.0).abs() < 1e-14 && (t.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rectangular_and_rank_deficient() {
        let tall = ComplexMatrix::from_fn(4, 2, |i, j| {
            Complex::new((i + 2 * j) as f64, (i * j) as f64 * 0.5)
        });
        let t = check(&tall);
        assert_eq!((t.u.rows(), t.v.rows(), t.s.len()), (4, 2, 2));
        let wide = tall.conj_transpose();
        let t = check(&wide);
        assert_eq!((t.u.rows(), t.v.rows(), t.s.len()), (2, 4, 2));
        let rank1 = ComplexMatrix::from_fn(3, 3, |i, j| {
            Complex::new((i + 1) as f64 * (j + 1) as f64, 0.0)
        });
        let t = check(&rank1);
        assert!(t.s[1] < 1e-12);
        let t = check(&ComplexMatrix::zeros(3, 3));
        assert!(t.s.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn phase_convention() {
        let h = ComplexMatrix::from_fn(3, 3, |i, j| {
            Complex::new((i as f64 - j as f64).sin(), (i * j) as f64 * 0.3 + 0.1)
        });
        let t = check(&h);
        for j in 0..3 {
            let (mut best, mut mag) = (0, -1.0);
            for i in 0..3 {
                if t.v.get(i, j).norm() > mag {
                    mag = t.v.get(i, j).norm();
                    best = i;
                }
            }
            let p = t.v.get(best, j);
            assert!(p.im == 0.0 && p.re > 0.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let h = real(1, 1, &[f64::NAN]);
        assert!(svd(&h).is_err());
    }
}
