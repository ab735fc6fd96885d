use std::sync::Arc;

use rand::Rng;

use crate::channel::{sample_complex_gaussian, svd, ChannelRealization, ComplexMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-sample channel state for one batched forward pass: precoder and
/// equalizer from `svd(H_est)`, the physical channel, the CSI input of the
/// adaptors and frozen receiver noise.
#[derive(Debug, Clone)]
pub struct LinkBatch<T> {
    pub v_est: Arc<Vec<ComplexMatrix<T>>>,
    pub h_p: Arc<Vec<ComplexMatrix<T>>>,
    pub u_est_h: Arc<Vec<ComplexMatrix<T>>>,
    /// `[B, 2·n_rx·n_tx]`: real parts of `H_est` row-major, then imaginary parts
    pub csi: Tensor<T>,
    /// `[B, n_rx, 2d]` real bridge, `None` for a noiseless link
    pub noise: Option<Tensor<T>>,
    pub snr_db: Vec<f64>,
}

/// Receiver noise for one transmission, `CN(0, σ²_n)` per symbol.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(
    n_rx: usize,
    d: usize,
    sigma_n_sq: f64,
    rng: &mut R,
) -> ComplexMatrix<T> {
    sample_complex_gaussian(n_rx, d, sigma_n_sq, rng)
}

impl<T: Scalar> LinkBatch<T> {
    /// `noise[i]` must be `n_rx × d`; pass an empty slice for a noiseless link.
    pub fn new(realizations: &[ChannelRealization<T>], noise: &[ComplexMatrix<T>]) -> Result<Self> {
        let Some(first) = realizations.first() else {
            return Err(Error::Validation("empty channel batch".into()));
        };
        let (n_rx, n_tx) = first.h_p.dims();
        let mut v_est = Vec::with_capacity(realizations.len());
        let mut u_est_h = Vec::with_capacity(realizations.len());
        let mut h_p = Vec::with_capacity(realizations.len());
        let mut csi = Vec::with_capacity(realizations.len() * 2 * n_rx * n_tx);
        for r in realizations {
            if r.h_p.dims() != (n_rx, n_tx) || r.h_est.dims() != (n_rx, n_tx) {
                return Err(Error::Validation(
                    "inconsistent channel dimensions in batch".into(),
                ));
            }
            let f = svd(&r.h_est)?;
            v_est.push(f.v);
            u_est_h.push(f.u.conj_transpose());
            h_p.push(r.h_p.clone());
            csi.extend_from_slice(r.h_est.re());
            csi.extend_from_slice(r.h_est.im());
        }
        let batch = realizations.len();
        let noise = if noise.is_empty() {
            None
        } else {
            if noise.len() != batch {
                return Err(Error::Validation(format!(
                    "{} noise draws for {batch} samples",
                    noise.len()
                )));
            }
            let d = noise[0].cols();
            let mut data = Vec::with_capacity(batch * n_rx * 2 * d);
            for n in noise {
                if n.dims() != (n_rx, d) {
                    return Err(Error::Validation("noise shape mismatch".into()));
                }
                data.extend(crate::channel::to_bridge(n).into_data());
            }
            Some(Tensor::new(vec![batch, n_rx, 2 * d], data)?)
        };
        Ok(Self {
            v_est: Arc::new(v_est),
            h_p: Arc::new(h_p),
            u_est_h: Arc::new(u_est_h),
            csi: Tensor::new(vec![batch, 2 * n_rx * n_tx], csi)?,
            noise,
            snr_db: realizations.iter().map(|r| r.snr_db).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.h_p.len()
    }

    /// Replaces the per-sample SNR fed to the SNR modulators.
    pub fn with_snr_db(mut self, snr_db: Vec<f64>) -> Self {
        self.snr_db = snr_db;
        self
    }
}
