//! Denoisers `D(x̃, y, Σ)`: the closed-form vicinal optimum and a
//! preconditioned trainable network, plus the vicinal training loss.

mod closed_form;
mod loss;
mod network;
mod precond;

pub use closed_form::{closed_form_denoise, vicinal_score, ClosedFormDenoiser};
pub use loss::{
    batch_loss, batch_loss_and_grad, batch_loss_with, draw_vicinal_batch, sample_sigma, train,
    vicinal_loss_batch, BatchElement, LossConfig, TrainSettings, VicinalBatch,
};
pub use network::{
    label_features, noise_features, Activation, MlpShape, ParamsFile, ParamsHeader,
    TrainableDenoiser, LABEL_FEATURES, NOISE_FEATURES,
};
pub use precond::{noise_weight, precond_coeffs, PrecondCoeffs};

use crate::covariance::DiagCov;
use crate::error::Result;

/// A map from a noisy sample to an estimate of the clean sample.
///
/// `label = None` selects the unconditional branch used by classifier-free
/// guidance.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x_noisy: &[f64], label: Option<f64>, sigma: &DiagCov) -> Result<Vec<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x_noisy: &[f64], label: Option<f64>, sigma: &DiagCov) -> Result<Vec<f64>> {
        (**self).denoise(x_noisy, label, sigma)
    }
}
