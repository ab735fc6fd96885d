use std::sync::Arc;

use rand::Rng;

use super::{sample_complex_gaussian, ComplexMatrix};
use crate::error::{ChannelError, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// `σ²_n = P / 10^(snr/10)`.
pub fn snr_to_noise_var(snr_db: f64, signal_power: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// Scales `z` to unit mean symbol power.
pub fn power_normalize<T: Scalar>(z: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>, ChannelError> {
    let norm = z.frobenius();
    if norm == T::zero() || !norm.is_finite() {
        return Err(ChannelError::Degenerate("power_normalize of a zero matrix"));
    }
    let n = T::from_usize(z.rows() * z.cols()).unwrap();
    Ok(z.scale(n.sqrt() / norm))
}

/// `z = V · z_C`.
pub fn precode<T: Scalar>(
    z_c: &ComplexMatrix<T>,
    v: &ComplexMatrix<T>,
) -> Result<ComplexMatrix<T>, ChannelError> {
    v.matmul(z_c)
}

/// `ẑ = H_p · z + N` with `N` i.i.d. `CN(0, σ²_n)`.
pub fn transmit<T: Scalar, R: Rng + ?Sized>(
    z: &ComplexMatrix<T>,
    h_p: &ComplexMatrix<T>,
    sigma_n_sq: f64,
    rng: &mut R,
) -> Result<ComplexMatrix<T>, ChannelError> {
    if sigma_n_sq < 0.0 || sigma_n_sq.is_nan() {
        return Err(ChannelError::NegativeVariance(sigma_n_sq));
    }
    let hz = h_p.matmul(z)?;
    if sigma_n_sq == 0.0 {
        return Ok(hz);
    }
    let noise = sample_complex_gaussian(hz.rows(), hz.cols(), sigma_n_sq, rng);
    hz.add(&noise)
}

/// `U_estᴴ · ẑ`.
pub fn equalize<T: Scalar>(
    z_hat: &ComplexMatrix<T>,
    u_est: &ComplexMatrix<T>,
) -> Result<ComplexMatrix<T>, ChannelError> {
    if u_est.rows() != z_hat.rows() {
        return Err(ChannelError::Shape {
            op: "equalize",
            lhs: u_est.dims(),
            rhs: z_hat.dims(),
        });
    }
    u_est.conj_transpose().matmul(z_hat)
}

/// Real bridge `[n × 2d]`: first `d` columns real parts, last `d` imaginary.
pub fn to_bridge<T: Scalar>(z: &ComplexMatrix<T>) -> Tensor<T> {
    let (n, d) = z.dims();
    let mut data = Vec::with_capacity(2 * n * d);
    for i in 0..n {
        data.extend_from_slice(&z.re()[i * d..(i + 1) * d]);
        data.extend_from_slice(&z.im()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![n, 2 * d], data).expect("bridge shape")
}

/// Inverse of [`to_bridge`] for a rank-2 tensor with even width.
pub fn from_bridge<T: Scalar>(t: &Tensor<T>) -> Result<ComplexMatrix<T>, ChannelError> {
    let (n, w) = match t.shape() {
        [n, w] => (*n, *w),
        s => {
            return Err(ChannelError::Shape {
                op: "from_bridge",
                lhs: (s.len(), 0),
                rhs: (2, 0),
            })
        }
    };
    if w % 2 != 0 {
        return Err(ChannelError::OddWidth(w));
    }
    let d = w / 2;
    let mut re = Vec::with_capacity(n * d);
    let mut im = Vec::with_capacity(n * d);
    for row in t.data().chunks(w) {
        re.extend_from_slice(&row[..d]);
        im.extend_from_slice(&row[d..]);
    }
    ComplexMatrix::new(n, d, re, im)
}

// Graph forms: the channel matrices are constants and gradients reach only
// the transmitted features.

pub fn precode_var<T: Scalar>(
    g: &mut Graph<T>,
    z_c: Var,
    v: Arc<Vec<ComplexMatrix<T>>>,
) -> Result<Var, TensorError> {
    g.complex_apply(z_c, v)
}

/// `H_p · z + N` where `noise` is a frozen real-bridge tensor of the output shape.
pub fn transmit_var<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    h_p: Arc<Vec<ComplexMatrix<T>>>,
    noise: Option<Tensor<T>>,
) -> Result<Var, TensorError> {
    let hz = g.complex_apply(z, h_p)?;
    match noise {
        Some(n) => {
            let nv = g.constant(n);
            g.add(hz, nv)
        }
        None => Ok(hz),
    }
}

pub fn equalize_var<T: Scalar>(
    g: &mut Graph<T>,
    z_hat: Var,
    u_est_h: Arc<Vec<ComplexMatrix<T>>>,
) -> Result<Var, TensorError> {
    g.complex_apply(z_hat, u_est_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;

    #[test]
    fn noise_variance_from_snr() {
        assert_eq!(snr_to_noise_var(0.0, 1.0), 1.0);
        assert!((snr_to_noise_var(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_var(-6.0, 1.0) - 3.981_071_705_534_972).abs() < 1e-12);
    }

    #[test]
    fn bridge_definition_and_odd_width() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = from_bridge(&t).unwrap();
        assert_eq!(z.get(0, 0), Complex::new(1.0, 2.0));
        assert_eq!(to_bridge(&z), t);
        let odd = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(from_bridge(&odd), Err(ChannelError::OddWidth(3)));
    }

    #[test]
    fn power_normalize_contracts() {
        let ones = ComplexMatrix::<f64>::from_fn(16, 16, |_, _| Complex::new(1.0, 0.0));
        assert_eq!(power_normalize(&ones).unwrap(), ones);
        let z = ComplexMatrix::<f64>::from_fn(3, 4, |i, j| {
            Complex::new(i as f64 - 1.0, j as f64 * 0.7)
        });
        let a = power_normalize(&z).unwrap();
        let b = power_normalize(&z.scale(7.0)).unwrap();
        assert!(a.sub(&b).unwrap().frobenius() < 1e-14);
        assert!((a.frobenius_sq() - 12.0).abs() < 1e-9);
        assert!(power_normalize(&ComplexMatrix::<f64>::zeros(2, 2)).is_err());
    }

    #[test]
    fn negative_noise_rejected() {
        use rand::SeedableRng;
        let mut rng = super::super::ChannelRng::seed_from_u64(0);
        let z = ComplexMatrix::<f64>::identity(2);
        assert!(transmit(&z, &z, -1.0, &mut rng).is_err());
        assert_eq!(transmit(&z, &z, 0.0, &mut rng).unwrap(), z);
    }
}
