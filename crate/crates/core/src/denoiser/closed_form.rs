use crate::covariance::DiagCov;
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::vicinity::{vicinity_members, VicinityConfig};

use super::Denoiser;

/// The minimizer of the vicinal denoising loss over all functions:
///
/// ```text
/// D*(x̃, y, Σ) = Σ_i W_{i,y} N(x̃; x_i, Σ) x_i / Σ_i W_{i,y} N(x̃; x_i, Σ)
/// ```
///
/// The unconditional branch (`label = None`) uses every training sample.
#[derive(Debug, Clone)]
pub struct ClosedFormDenoiser {
    dataset: LabeledDataset,
    vicinity: VicinityConfig,
}

impl ClosedFormDenoiser {
    pub fn new(dataset: LabeledDataset, vicinity: VicinityConfig) -> Result<Self> {
        vicinity.validate()?;
        Ok(ClosedFormDenoiser { dataset, vicinity })
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.dataset
    }

    pub fn vicinity(&self) -> &VicinityConfig {
        &self.vicinity
    }

    fn members(&self, label: Option<f64>) -> Result<Vec<usize>> {
        match label {
            None => Ok((0..self.dataset.len()).collect()),
            Some(y) => {
                let m = vicinity_members(self.dataset.labels(), y, &self.vicinity)?;
                if m.is_empty() {
                    Err(Error::EmptyVicinity { label: y })
                } else {
                    Ok(m)
                }
            }
        }
    }

    /// Normalized posterior responsibilities of the vicinity members, computed
    /// in the log domain with max-subtraction so they never underflow to 0/0.
    fn responsibilities(&self, x: &[f64], members: &[usize], sigma: &DiagCov) -> Vec<f64> {
        let log_w: Vec<f64> = members
            .iter()
            .map(|&i| {
                let xi = self.dataset.sample(i);
                -0.5 * x
                    .iter()
                    .zip(xi)
                    .zip(sigma.iter())
                    .map(|((a, b), s)| (a - b) * (a - b) / s)
                    .sum::<f64>()
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }

    fn check_input(&self, x: &[f64], sigma: &DiagCov) -> Result<()> {
        let d = self.dataset.dim();
        if x.len() != d || sigma.len() != d {
            return Err(Error::domain(format!(
                "denoiser expects dimension {d}, got x of {} and Σ of {}",
                x.len(),
                sigma.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite noisy sample"));
        }
        sigma.ensure_positive()
    }
}

impl Denoiser for ClosedFormDenoiser {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn denoise(&self, x_noisy: &[f64], label: Option<f64>, sigma: &DiagCov) -> Result<Vec<f64>> {
        self.check_input(x_noisy, sigma)?;
        let members = self.members(label)?;
        let resp = self.responsibilities(x_noisy, &members, sigma);
        let mut out = vec![0.0; self.dataset.dim()];
        for (&i, r) in members.iter().zip(&resp) {
            for (o, xi) in out.iter_mut().zip(self.dataset.sample(i)) {
                *o += r * xi;
            }
        }
        Ok(out)
    }
}

pub fn closed_form_denoise(
    cf: &ClosedFormDenoiser,
    x_noisy: &[f64],
    y: f64,
    sigma: &DiagCov,
) -> Result<Vec<f64>> {
    cf.denoise(x_noisy, Some(y), sigma)
}

/// Score of the vicinal noisy density, `Σ^{-1}(D*(x̃, y, Σ) - x̃)`.
pub fn vicinal_score(
    cf: &ClosedFormDenoiser,
    x_noisy: &[f64],
    y: f64,
    sigma: &DiagCov,
) -> Result<Vec<f64>> {
    let d = closed_form_denoise(cf, x_noisy, y, sigma)?;
    Ok(d.iter()
        .zip(x_noisy)
        .zip(sigma.iter())
        .map(|((di, xi), s)| (di - xi) / s)
        .collect())
}
