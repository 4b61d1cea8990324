//! Conditional noise predictors.
//!
//! [`gmm`] is an exact predictor for Gaussian-mixture data, used to check
//! the samplers in closed form. [`net`] is a small convolutional network
//! conditioned on the anatomy volume, trained by [`train`].

pub mod checkpoint;
pub mod gmm;
pub mod net;
pub mod train;

pub use crate::diffusion::DenoiserOutput;
use crate::error::{Error, Result};

/// Noise predictor for single slices of a volume.
pub trait Denoiser: Sync {
    /// `eps_hat` and `v` for slice `slice` of a volume at timestep `t`.
    fn predict(&self, x_t: &[f64], t: usize, slice: usize) -> Result<DenoiserOutput>;

    /// Vector-Jacobian product `(d eps_hat / d x_t)^T upstream`.
    fn eps_vjp(&self, x_t: &[f64], t: usize, slice: usize, upstream: &[f64]) -> Result<Vec<f64>>;
}

/// Weight of anatomy slice `j` when predicting slice `i`:
/// `1 - |i - j| / n_slices`.
pub fn depth_weights(i: usize, n_slices: usize) -> Result<Vec<f64>> {
    if i >= n_slices {
        return Err(Error::param(format!("slice {i} out of range 0..{n_slices}")));
    }
    Ok((0..n_slices).map(|j| depth_weight(i, j, n_slices)).collect())
}

#[inline]
pub(crate) fn depth_weight(i: usize, j: usize, n_slices: usize) -> f64 {
    1.0 - i.abs_diff(j) as f64 / n_slices as f64
}
