use crate::covariance::DiagCov;
use crate::error::{Error, Result};

/// Diagonal preconditioning coefficients:
///
/// ```text
/// c_in    = (σ_d² + Σ)^{-1/2}
/// c_skip  = σ_d² / (σ_d² + Σ)
/// c_out   = σ_d·Σ^{1/2} / (σ_d² + Σ)^{1/2}
/// c_noise = ¼·ln Σ
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct PrecondCoeffs {
    pub c_in: Vec<f64>,
    pub c_skip: Vec<f64>,
    pub c_out: Vec<f64>,
    pub c_noise: Vec<f64>,
}

fn check(sigma: &DiagCov, sigma_data: f64) -> Result<()> {
    if !(sigma_data > 0.0) || !sigma_data.is_finite() {
        return Err(Error::domain(format!(
            "sigma_data must be finite and > 0, got {sigma_data}"
        )));
    }
    sigma.ensure_positive()
}

pub fn precond_coeffs(sigma: &DiagCov, sigma_data: f64) -> Result<PrecondCoeffs> {
    check(sigma, sigma_data)?;
    let sd2 = sigma_data * sigma_data;
    let d = sigma.len();
    let mut c = PrecondCoeffs {
        c_in: Vec::with_capacity(d),
        c_skip: Vec::with_capacity(d),
        c_out: Vec::with_capacity(d),
        c_noise: Vec::with_capacity(d),
    };
    for &s in sigma.iter() {
        let total = sd2 + s;
        c.c_in.push(1.0 / total.sqrt());
        c.c_skip.push(sd2 / total);
        c.c_out.push(sigma_data * s.sqrt() / total.sqrt());
        c.c_noise.push(0.25 * s.ln());
    }
    Ok(c)
}

/// Loss weighting `Λ_ii = (Σ_ii + σ_d²) / (σ_d²·Σ_ii)`, the reciprocal of
/// `c_out²`.
pub fn noise_weight(sigma: &DiagCov, sigma_data: f64) -> Result<DiagCov> {
    check(sigma, sigma_data)?;
    let sd2 = sigma_data * sigma_data;
    Ok(DiagCov(
        sigma.iter().map(|&s| (s + sd2) / (sd2 * s)).collect(),
    ))
}
