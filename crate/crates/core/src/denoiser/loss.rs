//! Noise-weighted vicinal training loss and a plain SGD training loop.
//!
//! One batch element is drawn as follows:
//!
//! 1. `ln σ ~ N(P_mean, P_std²)`
//! 2. target label `y = y_j + η` from the label KDE, clamped to the label range
//! 3. a training index `i` uniformly from the vicinity of `y`
//! 4. `ε ~ N(0, Σ(σ, y))` and `x̃ = x_i + ε`
//! 5. with probability `label_drop_prob` the label is replaced by the null token
//!
//! and contributes `‖Λ_Σ^{1/2}(D_θ(x̃, y, Σ) - x_i)‖²`. The batch loss is the
//! mean over elements.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovParams, DiagCov};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::vicinity::{sample_target_label, vicinity_members, KdeConfig, VicinityConfig};

use super::network::TrainableDenoiser;
use super::precond::noise_weight;
use super::Denoiser;

/// Maximum number of target-label redraws when a fixed vicinity comes up
/// empty.
const MAX_LABEL_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    pub batch_size: usize,
    pub label_drop_prob: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
            batch_size: 64,
            label_drop_prob: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0) || !self.p_std.is_finite() || !self.p_mean.is_finite() {
            return Err(Error::config("loss.p_std must be > 0 and p_mean finite"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("loss.sigma_data must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("loss.batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.label_drop_prob) {
            return Err(Error::config("loss.label_drop_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Log-normal noise level: `ln σ ~ N(P_mean, P_std²)`.
pub fn sample_sigma<R: Rng + ?Sized>(cfg: &LossConfig, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * z).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchElement {
    pub sigma: f64,
    /// Target label, `None` when dropped for the unconditional branch.
    pub label: Option<f64>,
    /// The label the vicinity and covariance were built from.
    pub target_label: f64,
    pub index: usize,
    pub cov: DiagCov,
    pub x_noisy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VicinalBatch {
    pub elements: Vec<BatchElement>,
}

/// Configuration bundle for the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub vicinity: VicinityConfig,
    pub kde: KdeConfig,
    pub cov: CovParams,
    pub loss: LossConfig,
}

pub fn draw_vicinal_batch<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<VicinalBatch> {
    settings.loss.validate()?;
    settings.vicinity.validate()?;
    let d = dataset.dim();
    if settings.cov.dim() != d {
        return Err(Error::config(format!(
            "covariance embedding has dimension {} but data has {d}",
            settings.cov.dim()
        )));
    }
    let (lo, hi) = dataset.label_range();
    let mut elements = Vec::with_capacity(settings.loss.batch_size);
    for _ in 0..settings.loss.batch_size {
        let sigma = sample_sigma(&settings.loss, rng);
        let mut picked = None;
        for _ in 0..MAX_LABEL_RETRIES {
            let y = sample_target_label(dataset.labels(), &settings.kde, rng).clamp(lo, hi);
            let members = vicinity_members(dataset.labels(), y, &settings.vicinity)?;
            if !members.is_empty() {
                picked = Some((y, members[rng.random_range(0..members.len())]));
                break;
            }
        }
        let (y, index) = picked.ok_or_else(|| {
            Error::config(format!(
                "no non-empty vicinity after {MAX_LABEL_RETRIES} label draws; widen kappa"
            ))
        })?;
        let cov = settings.cov.at_label(y)?.sigma(sigma)?;
        let x0 = dataset.sample(index);
        let x_noisy: Vec<f64> = x0
            .iter()
            .zip(cov.iter())
            .map(|(x, s)| {
                let z: f64 = StandardNormal.sample(rng);
                x + s.sqrt() * z
            })
            .collect();
        let drop = rng.random::<f64>() < settings.loss.label_drop_prob;
        elements.push(BatchElement {
            sigma,
            label: if drop { None } else { Some(y) },
            target_label: y,
            index,
            cov,
            x_noisy,
        });
    }
    Ok(VicinalBatch { elements })
}

fn weighted_residual_norm(
    lambda: &DiagCov,
    output: &[f64],
    target: &[f64],
) -> f64 {
    lambda
        .iter()
        .zip(output)
        .zip(target)
        .map(|((l, o), t)| l * (o - t) * (o - t))
        .sum()
}

/// Batch loss for any denoiser.
pub fn batch_loss_with<D: Denoiser + ?Sized>(
    denoiser: &D,
    batch: &VicinalBatch,
    dataset: &LabeledDataset,
    sigma_data: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for e in &batch.elements {
        let out = denoiser.denoise(&e.x_noisy, e.label, &e.cov)?;
        let lambda = noise_weight(&e.cov, sigma_data)?;
        total += weighted_residual_norm(&lambda, &out, dataset.sample(e.index));
    }
    Ok(total / batch.elements.len() as f64)
}

pub fn batch_loss(
    td: &TrainableDenoiser,
    batch: &VicinalBatch,
    dataset: &LabeledDataset,
) -> Result<f64> {
    batch_loss_with(td, batch, dataset, td.sigma_data())
}

/// Batch loss and its gradient with respect to every entry of
/// `td.params()`. Elements are reduced in batch order.
pub fn batch_loss_and_grad(
    td: &TrainableDenoiser,
    batch: &VicinalBatch,
    dataset: &LabeledDataset,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.elements.len() as f64;
    let mut grad = vec![0.0; td.n_params()];
    let mut total = 0.0;
    for e in &batch.elements {
        let eval = td.evaluate(&e.x_noisy, e.label, &e.cov)?;
        let lambda = noise_weight(&e.cov, td.sigma_data())?;
        let target = dataset.sample(e.index);
        total += weighted_residual_norm(&lambda, &eval.output, target);
        let grad_d: Vec<f64> = lambda
            .iter()
            .zip(&eval.output)
            .zip(target)
            .map(|((l, o), t)| 2.0 * l * (o - t) / n)
            .collect();
        td.accumulate_grad(&eval, e.label, &grad_d, &mut grad);
    }
    Ok((total / n, grad))
}

/// Draws a fresh batch and returns its loss and parameter gradient.
pub fn vicinal_loss_batch<R: Rng + ?Sized>(
    td: &TrainableDenoiser,
    dataset: &LabeledDataset,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let batch = draw_vicinal_batch(dataset, settings, rng)?;
    batch_loss_and_grad(td, &batch, dataset)
}

/// Plain SGD with a fixed step size. Returns the per-step loss trace; on a
/// non-finite loss the parameters are left at their last finite state and
/// the partial trace is returned inside the error.
pub fn train<R: Rng + ?Sized>(
    td: &mut TrainableDenoiser,
    dataset: &LabeledDataset,
    settings: &TrainSettings,
    steps: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(learning_rate > 0.0) {
        return Err(Error::config("learning rate must be > 0"));
    }
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = match vicinal_loss_batch(td, dataset, settings, rng) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, trace }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, trace });
        }
        trace.push(loss);
        for (p, g) in td.params_mut().iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
    }
    Ok(trace)
}
