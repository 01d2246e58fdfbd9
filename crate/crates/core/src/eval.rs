//! Sliding-window evaluation: sliced Wasserstein-1 distances between real and
//! generated samples around label centers, and label recovery error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::synthdata::DatasetSpec;

/// Fewer samples than this on either side marks a window as starved.
pub const MIN_WINDOW_SAMPLES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub centers: Vec<f64>,
    pub window: f64,
    pub n_projections: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            centers: Vec::new(),
            window: 0.05,
            n_projections: 64,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// `n` centers at the midpoints of `n` equal cells of the range.
    pub fn evenly_spaced(label_range: (f64, f64), n: usize, window: f64) -> Self {
        let (lo, hi) = label_range;
        EvalConfig {
            centers: (0..n)
                .map(|k| lo + (k as f64 + 0.5) / n as f64 * (hi - lo))
                .collect(),
            window,
            ..EvalConfig::default()
        }
    }

    pub fn validate(&self, label_range: (f64, f64)) -> Result<()> {
        if !(self.window > 0.0) || !self.window.is_finite() {
            return Err(Error::config("eval: window must be > 0"));
        }
        if self.n_projections == 0 {
            return Err(Error::config("eval: n_projections must be >= 1"));
        }
        if self.centers.is_empty() {
            return Err(Error::config("eval: at least one center is required"));
        }
        let (lo, hi) = label_range;
        if let Some(c) = self.centers.iter().find(|c| !(**c >= lo && **c <= hi)) {
            return Err(Error::config(format!(
                "eval: center {c} lies outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Exact `W_1` between two empirical laws on the line, the integral of the
/// absolute difference of their step quantile functions. For equal sizes this
/// is the mean absolute difference of matched order statistics.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("w1_1d needs two nonempty samples"));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len() as u128, b.len() as u128);
    // positions in units of 1/(n·m)
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0u128);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        acc += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(acc / (n * m) as f64)
}

/// `n` directions drawn uniformly from the unit sphere in `R^d`.
pub fn random_directions(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project<'a>(rows: impl Iterator<Item = &'a [f64]>, u: &[f64]) -> Vec<f64> {
    rows.map(|x| x.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
}

/// Mean over `directions` of the 1-D `W_1` between projected samples.
pub fn sliced_w1(a: &[&[f64]], b: &[&[f64]], directions: &[Vec<f64>]) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::domain("sliced_w1 needs at least one direction"));
    }
    let mut total = 0.0;
    for u in directions {
        let pa = project(a.iter().copied(), u);
        let pb = project(b.iter().copied(), u);
        total += w1_1d(&pa, &pb)?;
    }
    Ok(total / directions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingResult {
    pub centers: Vec<f64>,
    /// `None` where the window is starved.
    pub distances: Vec<Option<f64>>,
    /// Mean over non-starved centers; `None` if every window is starved.
    pub mean_distance: Option<f64>,
    pub starved_centers: Vec<f64>,
}

/// Per-center sliced `W_1` between the samples of `real` and `generated` whose
/// labels lie within `window` of the center.
pub fn sliding_distance(
    real: &LabeledDataset,
    generated: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<SlidingResult> {
    if real.dim() != generated.dim() {
        return Err(Error::Schema(format!(
            "real data has dimension {}, generated data {}",
            real.dim(),
            generated.dim()
        )));
    }
    if !(cfg.window > 0.0) || cfg.n_projections == 0 {
        return Err(Error::config("eval: need window > 0 and n_projections >= 1"));
    }
    let directions = random_directions(real.dim(), cfg.n_projections, cfg.seed);
    let distances = cfg
        .centers
        .par_iter()
        .map(|&c| {
            let ra = real.window(c, cfg.window);
            let gb = generated.window(c, cfg.window);
            if ra.len() < MIN_WINDOW_SAMPLES || gb.len() < MIN_WINDOW_SAMPLES {
                return Ok(None);
            }
            let a: Vec<&[f64]> = ra.iter().map(|&i| real.sample(i)).collect();
            let b: Vec<&[f64]> = gb.iter().map(|&i| generated.sample(i)).collect();
            sliced_w1(&a, &b, &directions).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<f64> = distances.iter().flatten().copied().collect();
    let starved_centers = cfg
        .centers
        .iter()
        .zip(&distances)
        .filter(|(_, d)| d.is_none())
        .map(|(c, _)| *c)
        .collect();
    Ok(SlidingResult {
        centers: cfg.centers.clone(),
        mean_distance: (!present.is_empty())
            .then(|| present.iter().sum::<f64>() / present.len() as f64),
        distances,
        starved_centers,
    })
}

/// `|ŷ_i - y_i|` per sample, with `ŷ` recovered from sample structure.
pub fn label_errors(generated: &LabeledDataset, spec: &DatasetSpec) -> Result<Vec<f64>> {
    if generated.dim() != spec.d {
        return Err(Error::Schema(format!(
            "samples have dimension {}, dataset spec {}",
            generated.dim(),
            spec.d
        )));
    }
    generated
        .rows()
        .map(|(y, x)| Ok((spec.recover_label(x)? - y).abs()))
        .collect()
}

/// Mean absolute label recovery error.
pub fn label_consistency(generated: &LabeledDataset, spec: &DatasetSpec) -> Result<f64> {
    let e = label_errors(generated, spec)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub centers: Vec<f64>,
    pub distances: Vec<Option<f64>>,
    pub mean_distance: Option<f64>,
    pub label_mae: Option<f64>,
    pub starved_centers: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(
        sliding: SlidingResult,
        label_mae: Option<f64>,
        config_hash: impl Into<String>,
        seed: u64,
    ) -> Self {
        MetricsReport {
            centers: sliding.centers,
            distances: sliding.distances,
            mean_distance: sliding.mean_distance,
            label_mae,
            starved_centers: sliding.starved_centers,
            config_hash: config_hash.into(),
            seed,
        }
    }
}
