//! Synthetic label-conditioned datasets with known conditional laws, plus
//! exact score and posterior-mean oracles for the Gaussian families.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::DiagCov;
use crate::dataset::LabeledDataset;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// `x | y ~ N(y·u, s²I)` with labels uniform on the range. An empty
    /// `direction` means `(1, ..., 1)/√d`; any other direction is normalized.
    GaussianShift {
        #[serde(default)]
        direction: Vec<f64>,
        noise_std: f64,
    },
    /// 2-D point at angle `θ(y)` on a circle of radius `r`, plus `N(0, s²I)`.
    /// `θ` maps the label range linearly onto `[0, π/2)`.
    Ring { radius: f64, noise_std: f64 },
    /// GaussianShift whose labels come from a mixture: with probability
    /// `center_weight` a normal at the range center with standard deviation
    /// `center_std_frac·(hi - lo)` truncated to the range, otherwise uniform.
    ImbalancedShift {
        #[serde(default)]
        direction: Vec<f64>,
        noise_std: f64,
        center_weight: f64,
        center_std_frac: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub d: usize,
    pub label_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

fn unit_direction(direction: &[f64], d: usize) -> Result<Vec<f64>> {
    if direction.is_empty() {
        return Ok(vec![1.0 / (d as f64).sqrt(); d]);
    }
    if direction.len() != d {
        return Err(Error::config(format!(
            "direction has {} entries, expected {d}",
            direction.len()
        )));
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::config("direction must be a finite nonzero vector"));
    }
    Ok(direction.iter().map(|v| v / norm).collect())
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("dataset: n_samples must be >= 1"));
        }
        if self.d == 0 {
            return Err(Error::config("dataset: d must be >= 1"));
        }
        let (lo, hi) = self.label_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!(
                "dataset: label range [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("dataset: {name} must be > 0, got {v}")))
            }
        };
        match &self.kind {
            DatasetKind::GaussianShift {
                direction,
                noise_std,
            } => {
                positive(*noise_std, "noise_std")?;
                unit_direction(direction, self.d)?;
            }
            DatasetKind::Ring { radius, noise_std } => {
                positive(*radius, "radius")?;
                positive(*noise_std, "noise_std")?;
                if self.d != 2 {
                    return Err(Error::config("dataset: ring data is 2-dimensional"));
                }
            }
            DatasetKind::ImbalancedShift {
                direction,
                noise_std,
                center_weight,
                center_std_frac,
            } => {
                positive(*noise_std, "noise_std")?;
                positive(*center_std_frac, "center_std_frac")?;
                unit_direction(direction, self.d)?;
                if !(0.0..=1.0).contains(center_weight) {
                    return Err(Error::config("dataset: center_weight must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        match self.kind {
            DatasetKind::GaussianShift { noise_std, .. }
            | DatasetKind::Ring { noise_std, .. }
            | DatasetKind::ImbalancedShift { noise_std, .. } => noise_std,
        }
    }

    /// Unit shift direction of the Gaussian families.
    pub fn direction(&self) -> Result<Vec<f64>> {
        match &self.kind {
            DatasetKind::GaussianShift { direction, .. }
            | DatasetKind::ImbalancedShift { direction, .. } => unit_direction(direction, self.d),
            DatasetKind::Ring { .. } => Err(Error::Unsupported(
                "ring data has no shift direction".into(),
            )),
        }
    }

    /// Ring angle `θ(y) = (y - lo)/(hi - lo)·π/2`.
    pub fn ring_angle(&self, y: f64) -> f64 {
        let (lo, hi) = self.label_range;
        (y - lo) / (hi - lo) * FRAC_PI_2
    }

    /// Noise-free conditional center at label `y`.
    pub fn center(&self, y: f64) -> Result<Vec<f64>> {
        match &self.kind {
            DatasetKind::Ring { radius, .. } => {
                let th = self.ring_angle(y);
                Ok(vec![radius * th.cos(), radius * th.sin()])
            }
            _ => Ok(self.direction()?.iter().map(|u| y * u).collect()),
        }
    }

    /// Label read back from sample structure: the angle for ring data, the
    /// projection onto `u` for the shift families.
    pub fn recover_label(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::domain(format!(
                "sample has dimension {}, expected {}",
                x.len(),
                self.d
            )));
        }
        match &self.kind {
            DatasetKind::Ring { .. } => {
                let (lo, hi) = self.label_range;
                Ok(lo + x[1].atan2(x[0]) / FRAC_PI_2 * (hi - lo))
            }
            _ => Ok(self.direction()?.iter().zip(x).map(|(u, v)| u * v).sum()),
        }
    }

    /// CDF of the label distribution.
    pub fn label_cdf(&self, y: f64) -> f64 {
        let (lo, hi) = self.label_range;
        let uniform = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
        match self.kind {
            DatasetKind::ImbalancedShift {
                center_weight,
                center_std_frac,
                ..
            } => {
                let n = Normal::new(0.5 * (lo + hi), center_std_frac * (hi - lo))
                    .expect("validated std");
                let (a, b) = (n.cdf(lo), n.cdf(hi));
                let trunc = ((n.cdf(y.clamp(lo, hi)) - a) / (b - a)).clamp(0.0, 1.0);
                center_weight * trunc + (1.0 - center_weight) * uniform
            }
            _ => uniform,
        }
    }

    fn draw_label<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.label_range;
        match self.kind {
            DatasetKind::ImbalancedShift {
                center_weight,
                center_std_frac,
                ..
            } if rng.random::<f64>() < center_weight => {
                let (c, sd) = (0.5 * (lo + hi), center_std_frac * (hi - lo));
                loop {
                    let z: f64 = StandardNormal.sample(rng);
                    let y = c + sd * z;
                    if (lo..hi).contains(&y) {
                        break y;
                    }
                }
            }
            _ => rng.random_range(lo..hi),
        }
    }

    fn draw_sample<R: Rng + ?Sized>(&self, y: f64, rng: &mut R) -> Result<Vec<f64>> {
        let s = self.noise_std();
        Ok(self
            .center(y)?
            .into_iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect())
    }
}

/// Draws `n_samples` labelled points. Labels and samples are interleaved in
/// the RNG stream, one label then its `d` coordinates.
pub fn generate<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut samples = Vec::with_capacity(spec.n_samples * spec.d);
    for _ in 0..spec.n_samples {
        let y = spec.draw_label(rng);
        samples.extend(spec.draw_sample(y, rng)?);
        labels.push(y);
    }
    LabeledDataset::new(spec.d, samples, labels, spec.label_range)
}

/// [`generate`] driven by `ChaCha8Rng::seed_from_u64(spec.seed)`.
pub fn generate_seeded(spec: &DatasetSpec) -> Result<LabeledDataset> {
    generate(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// Fresh draws from `p(x | y)` at the given labels.
pub fn generate_at_labels<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    labels: &[f64],
    rng: &mut R,
) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(labels.len() * spec.d);
    for &y in labels {
        samples.extend(spec.draw_sample(y, rng)?);
    }
    LabeledDataset::new(spec.d, samples, labels.to_vec(), spec.label_range)
}

/// Exact oracle for the shift families, where the noised conditional law is
/// `N(y·u, s²I + Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticOracle {
    direction: Vec<f64>,
    noise_std: f64,
}

impl AnalyticOracle {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            DatasetKind::Ring { .. } => Err(Error::Unsupported(
                "analytic oracle is only defined for Gaussian datasets".into(),
            )),
            _ => Ok(AnalyticOracle {
                direction: spec.direction()?,
                noise_std: spec.noise_std(),
            }),
        }
    }

    pub fn mean(&self, y: f64) -> Vec<f64> {
        self.direction.iter().map(|u| y * u).collect()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn check(&self, x: &[f64], sigma: &DiagCov) -> Result<()> {
        if x.len() != self.direction.len() || sigma.len() != self.direction.len() {
            return Err(Error::domain("oracle dimension mismatch"));
        }
        sigma.ensure_positive()
    }
}

/// `-(s²I + Σ)^{-1}(x̃ - m(y))`
pub fn analytic_score(oracle: &AnalyticOracle, x: &[f64], y: f64, sigma: &DiagCov) -> Result<Vec<f64>> {
    oracle.check(x, sigma)?;
    let s2 = oracle.noise_std * oracle.noise_std;
    Ok(x.iter()
        .zip(oracle.mean(y))
        .zip(sigma.iter())
        .map(|((xi, m), s)| -(xi - m) / (s2 + s))
        .collect())
}

/// Posterior mean `x̃ + Σ·score`, evaluated as `(s²x̃ + Σm)/(s² + Σ)`.
pub fn analytic_denoiser(
    oracle: &AnalyticOracle,
    x: &[f64],
    y: f64,
    sigma: &DiagCov,
) -> Result<Vec<f64>> {
    oracle.check(x, sigma)?;
    let s2 = oracle.noise_std * oracle.noise_std;
    Ok(x.iter()
        .zip(oracle.mean(y))
        .zip(sigma.iter())
        .map(|((xi, m), s)| (s2 * xi + s * m) / (s2 + s))
        .collect())
}

impl Denoiser for AnalyticOracle {
    fn dim(&self) -> usize {
        self.direction.len()
    }

    fn denoise(&self, x_noisy: &[f64], label: Option<f64>, sigma: &DiagCov) -> Result<Vec<f64>> {
        match label {
            Some(y) => analytic_denoiser(self, x_noisy, y, sigma),
            None => Err(Error::Unsupported(
                "analytic oracle has no unconditional branch".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{vicinal_score, ClosedFormDenoiser};
    use crate::stats::chi_squared_p_value;
    use crate::vicinity::VicinityConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn shift(n: usize, d: usize, s: f64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianShift {
                direction: vec![],
                noise_std: s,
            },
            n_samples: n,
            d,
            label_range: (1.0, 2.0),
            seed: 5,
        }
    }

    fn ring(n: usize, s: f64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::Ring {
                radius: 3.0,
                noise_std: s,
            },
            n_samples: n,
            d: 2,
            label_range: (0.0, 90.0),
            seed: 11,
        }
    }

    #[test]
    fn validation() {
        assert!(shift(0, 2, 0.1).validate().is_err());
        assert!(shift(10, 2, 0.0).validate().is_err());
        assert!(ring(10, 0.1).validate().is_ok());
        let mut r = ring(10, 0.1);
        r.d = 3;
        assert!(r.validate().is_err());
    }

    #[test]
    fn vanishing_noise_puts_samples_on_the_mean() {
        let spec = shift(200, 3, 1e-300);
        let ds = generate_seeded(&spec).unwrap();
        let u = spec.direction().unwrap();
        for (y, x) in ds.rows() {
            for k in 0..3 {
                assert_eq!(x[k], y * u[k]);
            }
        }
    }

    #[test]
    fn ring_samples_stay_near_circle() {
        let s = 0.05;
        let ds = generate_seeded(&ring(20_000, s)).unwrap();
        for (_, x) in ds.rows() {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            assert!((r - 3.0).abs() <= 5.0 * s);
        }
    }

    #[test]
    fn noiseless_ring_label_recovery() {
        let spec = ring(1, 0.1);
        for y in [0.0, 10.0, 33.3, 60.0, 89.9] {
            let c = spec.center(y).unwrap();
            assert!((spec.recover_label(&c).unwrap() - y).abs() <= 1e-12 * 90.0);
        }
    }

    #[test]
    fn imbalanced_label_histogram() {
        let spec = DatasetSpec {
            kind: DatasetKind::ImbalancedShift {
                direction: vec![],
                noise_std: 0.1,
                center_weight: 0.9,
                center_std_frac: 0.08,
            },
            n_samples: 20_000,
            d: 2,
            label_range: (0.0, 1.0),
            seed: 17,
        };
        let ds = generate_seeded(&spec).unwrap();
        let bins = 20;
        let mut counts = vec![0u64; bins];
        for &y in ds.labels() {
            counts[((y * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let expected: Vec<f64> = (0..bins)
            .map(|b| {
                let (a, c) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
                (spec.label_cdf(c) - spec.label_cdf(a)) * spec.n_samples as f64
            })
            .collect();
        assert!(chi_squared_p_value(&counts, &expected) > 0.001);
        // tails really are sparse
        assert!(counts[0] < counts[bins / 2] / 10);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(
            generate_seeded(&ring(50, 0.1)).unwrap(),
            generate_seeded(&ring(50, 0.1)).unwrap()
        );
    }

    #[test]
    fn shift_is_label_covariant() {
        let a = shift(300, 2, 0.2);
        let mut b = a.clone();
        b.label_range = (4.0, 5.0);
        let (da, db) = (generate_seeded(&a).unwrap(), generate_seeded(&b).unwrap());
        let u = a.direction().unwrap();
        for i in 0..300 {
            assert!((db.labels()[i] - da.labels()[i] - 3.0).abs() < 1e-12);
            for k in 0..2 {
                assert!((db.sample(i)[k] - da.sample(i)[k] - 3.0 * u[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_examples() {
        let mut spec = shift(10, 2, 1.0);
        spec.kind = DatasetKind::GaussianShift {
            direction: vec![1.0, 0.0],
            noise_std: 1.0,
        };
        let o = AnalyticOracle::new(&spec).unwrap();
        let eye = DiagCov(vec![1.0; 2]);
        assert_eq!(analytic_score(&o, &[1.5, 0.0], 1.5, &eye).unwrap(), vec![-0.0, 0.0]);
        assert_eq!(analytic_score(&o, &[3.5, 0.0], 1.5, &eye).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(analytic_denoiser(&o, &[3.5, 2.0], 1.5, &eye).unwrap(), vec![2.5, 1.0]);
        let tiny = analytic_denoiser(&o, &[3.5, 2.0], 1.5, &DiagCov(vec![1e-20; 2])).unwrap();
        assert!((tiny[0] - 3.5).abs() < 1e-15 && (tiny[1] - 2.0).abs() < 1e-15);
        let huge = analytic_denoiser(&o, &[3.5, 2.0], 1.5, &DiagCov(vec![1e20; 2])).unwrap();
        assert!((huge[0] - 1.5).abs() < 1e-15 && huge[1].abs() < 1e-15);
        assert!(matches!(AnalyticOracle::new(&ring(5, 0.1)), Err(Error::Unsupported(_))));
        assert!(o.denoise(&[0.0, 0.0], None, &eye).is_err());
    }

    #[test]
    fn vicinal_score_converges_to_analytic() {
        // All samples share one label, so the all-ones vicinity is exactly p(x | y).
        let spec = shift(10_000, 2, 1.0);
        let y = 1.5;
        let labels = vec![y; spec.n_samples];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = generate_at_labels(&spec, &labels, &mut rng).unwrap();
        let o = AnalyticOracle::new(&spec).unwrap();
        let cf = ClosedFormDenoiser::new(ds, VicinityConfig::ALL).unwrap();
        let sigma = DiagCov(vec![1.0; 2]);
        let m = o.mean(y);
        for _ in 0..20 {
            let x: Vec<f64> = m
                .iter()
                .map(|mi| mi + rng.random_range(0.5..1.5) * if rng.random() { 1.0 } else { -1.0 })
                .collect();
            let a = analytic_score(&o, &x, y, &sigma).unwrap();
            let v = vicinal_score(&cf, &x, y, &sigma).unwrap();
            let num = a.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!(num / den <= 0.1, "relative error {}", num / den);
        }
    }

    proptest! {
        #[test]
        fn posterior_mean_between_input_and_prior_mean(
            x in prop::collection::vec(-10.0f64..10.0, 3),
            y in 1.0f64..2.0,
            log_s in prop::collection::vec(-8.0f64..8.0, 3),
        ) {
            let o = AnalyticOracle::new(&shift(1, 3, 0.7)).unwrap();
            let sigma = DiagCov(log_s.iter().map(|l| l.exp()).collect());
            let d = analytic_denoiser(&o, &x, y, &sigma).unwrap();
            let m = o.mean(y);
            for k in 0..3 {
                let (lo, hi) = (x[k].min(m[k]), x[k].max(m[k]));
                prop_assert!(d[k] >= lo - 1e-12 && d[k] <= hi + 1e-12);
            }
        }
    }
}
