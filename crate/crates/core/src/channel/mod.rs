//! MIMO link model: Rayleigh sampling, estimation-error injection, SVD
//! precoding, transmission and equalization.
//!
//! Every stochastic helper draws from an explicit RNG in `f64` and casts to
//! the working scalar, so `f32` and `f64` runs see the same realizations up
//! to rounding.

mod complex;
mod link;
mod svd;

pub use complex::ComplexMatrix;
pub use link::{
    equalize, equalize_var, from_bridge, power_normalize, precode, precode_var, snr_to_noise_var,
    to_bridge, transmit, transmit_var,
};
pub use svd::{svd, SvdTriple};

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::ChannelError;
use crate::scalar::Scalar;

/// Seeded stream used by every stochastic routine in the crate.
pub type ChannelRng = rand_chacha::ChaCha8Rng;

/// Mixes several words into one seed (splitmix64 finalizer per word), so
/// related streams such as `(master, stage)` or `(master, cell, sample)`
/// are decorrelated.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// One `CN(0, var)` draw: real and imaginary parts each `N(0, var/2)`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex<f64> {
    let sd = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(re * sd, im * sd)
}

/// Matrix of i.i.d. `CN(0, var)` entries.
pub fn sample_complex_gaussian<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    var: f64,
    rng: &mut R,
) -> ComplexMatrix<T> {
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let z = complex_normal(rng, var);
        Complex::new(T::lit(z.re), T::lit(z.im))
    })
}

/// Flat Rayleigh channel with i.i.d. `CN(0, 1)` gains.
pub fn sample_rayleigh<T: Scalar, R: Rng + ?Sized>(
    n_rx: usize,
    n_tx: usize,
    rng: &mut R,
) -> ComplexMatrix<T> {
    sample_complex_gaussian(n_rx, n_tx, 1.0, rng)
}

/// Sampled physical channel, estimation error and noise level for one
/// transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization<T> {
    pub h_p: ComplexMatrix<T>,
    pub h_e: ComplexMatrix<T>,
    pub h_est: ComplexMatrix<T>,
    pub sigma_e_sq: f64,
    /// linear noise power; zero means a noiseless link
    pub sigma_n_sq: f64,
    pub snr_db: f64,
    pub seed: Option<u64>,
}

impl<T: Scalar> ChannelRealization<T> {
    /// Sets the noise level from an SNR in dB at unit signal power.
    pub fn with_snr(mut self, snr_db: f64) -> Self {
        self.snr_db = snr_db;
        self.sigma_n_sq = snr_to_noise_var(snr_db, 1.0);
        self
    }

    pub fn noiseless(mut self) -> Self {
        self.snr_db = f64::INFINITY;
        self.sigma_n_sq = 0.0;
        self
    }

    /// Copy whose estimate is the physical channel itself.
    pub fn perfect(&self) -> Self {
        Self {
            h_e: ComplexMatrix::zeros(self.h_p.rows(), self.h_p.cols()),
            h_est: self.h_p.clone(),
            sigma_e_sq: 0.0,
            ..self.clone()
        }
    }
}

/// `H_est = H_p + H_e` with `H_e` i.i.d. `CN(0, σ²_e)`. The result is
/// noiseless until [`ChannelRealization::with_snr`] is applied.
pub fn inject_estimation_error<T: Scalar, R: Rng + ?Sized>(
    h_p: &ComplexMatrix<T>,
    sigma_e_sq: f64,
    rng: &mut R,
) -> Result<ChannelRealization<T>, ChannelError> {
    if sigma_e_sq < 0.0 || sigma_e_sq.is_nan() {
        return Err(ChannelError::NegativeVariance(sigma_e_sq));
    }
    let h_e: ComplexMatrix<T> = sample_complex_gaussian(h_p.rows(), h_p.cols(), sigma_e_sq, rng);
    let h_est = if sigma_e_sq == 0.0 {
        h_p.clone()
    } else {
        h_p.add(&h_e)?
    };
    Ok(ChannelRealization {
        h_p: h_p.clone(),
        h_e,
        h_est,
        sigma_e_sq,
        sigma_n_sq: 0.0,
        snr_db: f64::INFINITY,
        seed: None,
    })
}

/// Draws `H_p`, then `H_e`, from one seeded stream.
pub fn sample_realization<T: Scalar>(
    n_rx: usize,
    n_tx: usize,
    sigma_e_sq: f64,
    snr_db: f64,
    seed: u64,
) -> Result<ChannelRealization<T>, ChannelError> {
    use rand::SeedableRng;
    let mut rng = ChannelRng::seed_from_u64(seed);
    let h_p = sample_rayleigh(n_rx, n_tx, &mut rng);
    let mut r = inject_estimation_error(&h_p, sigma_e_sq, &mut rng)?.with_snr(snr_db);
    r.seed = Some(seed);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_error_keeps_estimate_bitwise() {
        let mut rng = ChannelRng::seed_from_u64(3);
        let h: ComplexMatrix<f64> = sample_rayleigh(4, 4, &mut rng);
        let r = inject_estimation_error(&h, 0.0, &mut rng).unwrap();
        assert_eq!(r.h_est, r.h_p);
        assert!(inject_estimation_error(&h, -0.1, &mut rng).is_err());
    }

    #[test]
    fn estimate_is_sum_exactly() {
        let r: ChannelRealization<f64> = sample_realization(3, 5, 0.05, 6.0, 11).unwrap();
        let sum = r.h_p.add(&r.h_e).unwrap();
        assert_eq!(sum, r.h_est);
        assert!((r.sigma_n_sq - 10f64.powf(-0.6)).abs() < 1e-15);
    }

    #[test]
    fn seeded_draw_repeats() {
        let a: ChannelRealization<f64> = sample_realization(4, 4, 0.03, 1.0, 42).unwrap();
        let b: ChannelRealization<f64> = sample_realization(4, 4, 0.03, 1.0, 42).unwrap();
        assert_eq!(a, b);
    }
}
