use num_complex::Complex;

use crate::error::ChannelError;
use crate::scalar::Scalar;

/// Dense complex matrix stored as split real/imaginary row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> ComplexMatrix<T> {
    pub fn new(rows: usize, cols: usize, re: Vec<T>, im: Vec<T>) -> Result<Self, ChannelError> {
        if rows == 0 || cols == 0 || re.len() != rows * cols || im.len() != rows * cols {
            return Err(ChannelError::Shape {
                op: "complex_matrix",
                lhs: (rows, cols),
                rhs: (re.len(), im.len()),
            });
        }
        Ok(Self { rows, cols, re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(
            rows,
            cols,
            vec![T::zero(); rows * cols],
            vec![T::zero(); rows * cols],
        )
        .expect("positive dimensions")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.re[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> Complex<T>,
    ) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Real `rows × cols` diagonal matrix with `diag` on the main diagonal.
    pub fn diag(rows: usize, cols: usize, diag: &[T]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (i, &s) in diag.iter().enumerate().take(rows.min(cols)) {
            m.re[i * cols + i] = s;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        let k = i * self.cols + j;
        Complex::new(self.re[k], self.im[k])
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex<T>) {
        let k = i * self.cols + j;
        self.re[k] = v.re;
        self.im[k] = v.im;
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, ChannelError> {
        if self.cols != rhs.rows {
            return Err(ChannelError::Shape {
                op: "matmul",
                lhs: self.dims(),
                rhs: rhs.dims(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let (ar, ai) = (self.re[i * k + p], self.im[i * k + p]);
                for j in 0..n {
                    let (br, bi) = (rhs.re[p * n + j], rhs.im[p * n + j]);
                    out.re[i * n + j] = out.re[i * n + j] + ar * br - ai * bi;
                    out.im[i * n + j] = out.im[i * n + j] + ar * bi + ai * br;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(
        &self,
        rhs: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self, ChannelError> {
        if self.dims() != rhs.dims() {
            return Err(ChannelError::Shape {
                op,
                lhs: self.dims(),
                rhs: rhs.dims(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            re: self
                .re
                .iter()
                .zip(&rhs.re)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            im: self
                .im
                .iter()
                .zip(&rhs.im)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, ChannelError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, ChannelError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().map(|&v| v * c).collect(),
            im: self.im.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> T {
        self.re.iter().chain(&self.im).map(|&v| v * v).sum()
    }

    pub fn frobenius(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    /// Mean of `|z_ij|²` over all entries.
    pub fn mean_power(&self) -> T {
        self.frobenius_sq() / T::from_usize(self.rows * self.cols).unwrap()
    }

    /// `‖self − I‖_F` for square matrices.
    pub fn distance_from_identity(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut v = self.get(i, j);
                if i == j {
                    v.re = v.re - T::one();
                }
                acc = acc + v.norm_sqr();
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ComplexMatrix<U> {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().map(|&v| U::lit(v.as_f64())).collect(),
            im: self.im.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Rows `0..n` of the matrix, keeping all columns.
    pub fn top_rows(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self {
            rows: n,
            cols: self.cols,
            re: self.re[..n * self.cols].to_vec(),
            im: self.im[..n * self.cols].to_vec(),
        }
    }
}
