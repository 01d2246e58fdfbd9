//! Hard vicinities around a target label, the label KDE, and the draws used by
//! the vicinal training loss.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

/// Indicator vicinity `W_{i,y} = 1{|y - y_i| <= κ_y}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum VicinityConfig {
    /// Fixed radius `κ`. `f64::INFINITY` selects every sample.
    HardFixed { kappa: f64 },
    /// Radius grown until at least `n_av` samples are covered.
    HardAdaptive { n_av: usize },
}

impl VicinityConfig {
    /// Every sample is in every vicinity.
    pub const ALL: VicinityConfig = VicinityConfig::HardFixed {
        kappa: f64::INFINITY,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            VicinityConfig::HardFixed { kappa } if !(kappa >= 0.0) => Err(Error::config(
                format!("fixed vicinity radius must be >= 0, got {kappa}"),
            )),
            VicinityConfig::HardAdaptive { n_av: 0 } => {
                Err(Error::config("adaptive vicinity needs n_av >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Vicinity radius at label `y`.
    pub fn radius(&self, labels: &[f64], y: f64) -> Result<f64> {
        self.validate()?;
        match *self {
            VicinityConfig::HardFixed { kappa } => Ok(kappa),
            VicinityConfig::HardAdaptive { n_av } => adaptive_radius(labels, y, n_av),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub sigma_kde: f64,
}

impl KdeConfig {
    /// Rule-of-thumb bandwidth `1.06·std(labels)·N^{-1/5}`. Falls back to a
    /// tiny positive bandwidth when every label is equal.
    pub fn rule_of_thumb(labels: &[f64]) -> Self {
        let n = labels.len().max(1) as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let bw = 1.06 * var.sqrt() * n.powf(-0.2);
        let floor = f64::EPSILON * mean.abs().max(1.0);
        KdeConfig {
            sigma_kde: bw.max(floor),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_kde > 0.0) || !self.sigma_kde.is_finite() {
            return Err(Error::config(format!(
                "sigma_kde must be finite and > 0, got {}",
                self.sigma_kde
            )));
        }
        Ok(())
    }
}

/// Smallest `κ` with `|{i : |y_i - y| <= κ}| >= min(n_av, N)`.
///
/// The result is the `min(n_av, N)`-th smallest distance `|y_i - y|`, floored
/// at a machine-epsilon multiple of the label scale when that distance is 0.
pub fn adaptive_radius(labels: &[f64], y: f64, n_av: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("adaptive radius of an empty label set"));
    }
    if n_av == 0 {
        return Err(Error::config("adaptive vicinity needs n_av >= 1"));
    }
    let k = n_av.min(labels.len());
    let mut dist: Vec<f64> = labels.iter().map(|yi| (yi - y).abs()).collect();
    let (_, kth, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
    let kappa = *kth;
    if kappa > 0.0 {
        return Ok(kappa);
    }
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = (hi - lo).max(y.abs()).max(f64::MIN_POSITIVE.sqrt());
    Ok(f64::EPSILON * scale)
}

/// Indicator weights `W_{i,y}` as 0.0 / 1.0.
pub fn vicinal_weights(labels: &[f64], y: f64, cfg: &VicinityConfig) -> Result<Vec<f64>> {
    let kappa = cfg.radius(labels, y)?;
    Ok(labels
        .iter()
        .map(|yi| if (y - yi).abs() <= kappa { 1.0 } else { 0.0 })
        .collect())
}

/// Indices `i` with `W_{i,y} = 1`, in ascending order. May be empty for a
/// fixed vicinity.
pub fn vicinity_members(labels: &[f64], y: f64, cfg: &VicinityConfig) -> Result<Vec<usize>> {
    let kappa = cfg.radius(labels, y)?;
    Ok(labels
        .iter()
        .enumerate()
        .filter(|(_, yi)| (y - **yi).abs() <= kappa)
        .map(|(i, _)| i)
        .collect())
}

/// `(1/N)·Σ_j exp(-(y - y_j)² / (2σ²))`. Deliberately unnormalized: the value
/// is 1 when all labels equal `y`.
pub fn kde_density(labels: &[f64], y: f64, cfg: &KdeConfig) -> f64 {
    let two_var = 2.0 * cfg.sigma_kde * cfg.sigma_kde;
    let total: f64 = labels
        .iter()
        .map(|yj| (-(y - yj).powi(2) / two_var).exp())
        .sum();
    total / labels.len() as f64
}

/// Draws a label from the KDE mixture: a uniform training label plus
/// `N(0, σ_KDE²)` jitter.
pub fn sample_target_label<R: Rng + ?Sized>(labels: &[f64], cfg: &KdeConfig, rng: &mut R) -> f64 {
    let j = rng.random_range(0..labels.len());
    let eta: f64 = StandardNormal.sample(rng);
    labels[j] + cfg.sigma_kde * eta
}

/// Uniform draw among the samples in the vicinity of `y`.
pub fn sample_vicinal_index<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    y: f64,
    cfg: &VicinityConfig,
    rng: &mut R,
) -> Result<usize> {
    let members = vicinity_members(dataset.labels(), y, cfg)?;
    if members.is_empty() {
        return Err(Error::EmptyVicinity { label: y });
    }
    Ok(members[rng.random_range(0..members.len())])
}
