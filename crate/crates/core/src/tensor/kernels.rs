//! Dense loops used by the graph operations.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    gemm_nn(a, &bt, c, m, n, k);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `permute(x, perm)`, the flat source index in `x`.
pub fn permute_gather(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// How a right-hand operand maps onto the left-hand (output) shape.
#[derive(Debug, Clone)]
pub enum Broadcast {
    Same,
    /// rhs shape is a trailing suffix of the output shape
    Suffix(usize),
    General(Vec<usize>),
}

impl Broadcast {
    pub fn plan(out: &[usize], rhs: &[usize]) -> Option<Self> {
        if out == rhs {
            return Some(Broadcast::Same);
        }
        if rhs.len() > out.len() {
            return None;
        }
        let pad = out.len() - rhs.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad)
            .chain(rhs.iter().copied())
            .collect();
        if padded.iter().zip(out).any(|(&r, &o)| r != o && r != 1) {
            return None;
        }
        if out[pad..] == *rhs {
            return Some(Broadcast::Suffix(rhs.iter().product()));
        }
        let rs = strides(&padded);
        let eff: Vec<usize> = padded
            .iter()
            .zip(&rs)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let n: usize = out.iter().product();
        let mut idx = vec![0usize; out.len()];
        let mut table = Vec::with_capacity(n);
        let mut src = 0usize;
        for _ in 0..n {
            table.push(src);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                src += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                src -= eff[ax] * out[ax];
                idx[ax] = 0;
            }
        }
        Some(Broadcast::General(table))
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(t) => t[i],
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        // nt with explicit transpose
        let bt = transpose(&b, 3, 4);
        let mut c2 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // tn: (aᵀ)ᵀ · b
        let at = transpose(&a, 2, 3);
        let mut c3 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn permute_matches_transpose() {
        let g = permute_gather(&[2, 3], &[1, 0]);
        assert_eq!(g, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn broadcast_plans() {
        assert!(matches!(
            Broadcast::plan(&[2, 3], &[2, 3]),
            Some(Broadcast::Same)
        ));
        assert!(matches!(
            Broadcast::plan(&[4, 2, 3], &[3]),
            Some(Broadcast::Suffix(3))
        ));
        let p = Broadcast::plan(&[2, 2, 3], &[2, 1, 3]).unwrap();
        let idx: Vec<usize> = (0..12).map(|i| p.index(i)).collect();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
        assert!(Broadcast::plan(&[2, 3], &[2]).is_none());
    }
}
