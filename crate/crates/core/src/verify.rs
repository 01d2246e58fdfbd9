//! Self-checks against reference computations written independently of the
//! production code paths. Each `measure_*` function returns raw numbers;
//! [`run`] turns them into pass/fail outcomes.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::covariance::{sigma_mat, CovParams, DiagCov, EmbeddingSpec};
use crate::dataset::LabeledDataset;
use crate::denoiser::{
    batch_loss, batch_loss_and_grad, draw_vicinal_batch, noise_weight, precond_coeffs,
    vicinal_score, Activation, ClosedFormDenoiser, Denoiser, LossConfig, TrainSettings,
    TrainableDenoiser, LABEL_FEATURES,
};
use crate::error::{Error, Result};
use crate::sampler::{
    direct_perturb, forward_simulate, heun_sample, heun_trajectory, stochastic_sample,
    time_grid, SamplerConfig, SamplerKind,
};
use crate::stats::{ks_test_normal, mean, variance, variance_ratio_test};
use crate::synthdata::{AnalyticOracle, DatasetKind, DatasetSpec};
use crate::vicinity::{KdeConfig, VicinityConfig};

pub const EDM_REDUCTION_TOL: f64 = 1e-12;
pub const VARIANCE_REL_TOL: f64 = 0.05;
pub const MEAN_STD_ERRORS: f64 = 3.0;
pub const MIN_P_VALUE: f64 = 0.001;
pub const DSTAR_ABS_TOL: f64 = 1e-8;
pub const SCORE_REL_TOL: f64 = 1e-5;
pub const HEUN_RATIO_RANGE: (f64, f64) = (3.0, 5.0);
pub const CHURN_ABS_TOL: f64 = 1e-12;
pub const LAMBDA_TOL: f64 = 1e-12;
pub const GRAD_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// Deterministic checks only.
    Fast,
    /// Adds the Monte-Carlo checks.
    Full,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::config(format!("unknown level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub details: serde_json::Value,
}

// ---------------------------------------------------------------------------
// reduction to the scalar noise schedule

#[derive(Debug, Clone, Serialize)]
pub struct EdmReduction {
    /// `Σ(t, y) == t²` bit for bit at every grid time and data label.
    pub sigma_exact: bool,
    pub max_rel_err: f64,
    pub steps: usize,
}

/// Scalar Heun sampler for `x | σ` with isotropic noise `σ²` and the
/// posterior-mean denoiser of the points `data`, indexed from `σ_max` down.
fn scalar_heun_reference(data: &[f64], x_start: f64, n: usize, s_min: f64, s_max: f64, rho: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n)
        .map(|i| {
            let a = s_max.powf(1.0 / rho);
            let b = s_min.powf(1.0 / rho);
            (a + i as f64 / (n - 1) as f64 * (b - a)).powf(rho)
        })
        .collect();
    t.push(0.0);
    let denoise = |x: f64, sigma: f64| {
        let logs: Vec<f64> = data
            .iter()
            .map(|xi| -(x - xi) * (x - xi) / (2.0 * sigma * sigma))
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (l, xi) in logs.iter().zip(data) {
            let w = (l - top).exp();
            num += w * xi;
            den += w;
        }
        num / den
    };
    let mut x = x_start;
    let mut out = vec![x];
    for i in 0..n {
        let (tc, tn) = (t[i], t[i + 1]);
        let d = (x - denoise(x, tc)) / tc;
        let mut next = x + (tn - tc) * d;
        if tn != 0.0 {
            let d2 = (next - denoise(next, tn)) / tn;
            next = x + (tn - tc) * (0.5 * d + 0.5 * d2);
        }
        x = next;
        out.push(x);
    }
    out
}

pub fn measure_edm_reduction(seed: u64) -> Result<EdmReduction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(3.0..5.0)).collect();
    let ds = LabeledDataset::from_rows(1, data.clone(), labels.clone())?;
    // a nonzero embedding that λ_y = 0 must switch off
    let cov = CovParams {
        lambda_y: 0.0,
        sigma_data: 0.5,
        embedding: EmbeddingSpec::Affine {
            offsets: vec![0.3],
            slopes: vec![1.7],
        },
    };
    let cfg = SamplerConfig {
        kind: SamplerKind::Ode,
        cfg_gamma: 1.0,
        ..SamplerConfig::default()
    };
    let grid = time_grid(&cfg)?;
    let mut sigma_exact = true;
    for &t in &grid.times[1..] {
        for &y in &labels {
            sigma_exact &= sigma_mat(t, y, &cov)?.0 == vec![t * t];
        }
    }
    let cf = ClosedFormDenoiser::new(ds, VicinityConfig::ALL)?;
    // |z| keeps the whole path on one side of zero, so relative error is
    // well defined at every step
    let z: f64 = StandardNormal.sample(&mut rng);
    let x_start = cfg.sigma_max * z.abs();
    let traj = heun_trajectory(&cf, labels[0], &cov, &cfg, &[x_start])?;
    let reference = scalar_heun_reference(&data, x_start, cfg.n_steps, cfg.sigma_min, cfg.sigma_max, cfg.rho);
    let max_rel_err = traj
        .states
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a[0] - b).abs() / b.abs())
        .fold(0.0, f64::max);
    Ok(EdmReduction {
        sigma_exact,
        max_rel_err,
        steps: cfg.n_steps,
    })
}

// ---------------------------------------------------------------------------
// marginals of the forward SDE

#[derive(Debug, Clone, Serialize)]
pub struct ForwardMarginal {
    pub target_variance: Vec<f64>,
    pub empirical_variance: Vec<f64>,
    pub variance_rel_err: Vec<f64>,
    /// `|mean| / standard error` per dimension.
    pub mean_std_errors: Vec<f64>,
    pub ks_p: Vec<f64>,
    /// Two-sided p of equal variances across dimensions when `λ_y = 0`.
    pub isotropic_p: f64,
}

fn forward_cov(lambda_y: f64) -> CovParams {
    CovParams {
        lambda_y,
        sigma_data: 0.5,
        embedding: EmbeddingSpec::Affine {
            offsets: vec![0.2, 1.5],
            slopes: vec![0.5, 0.0],
        },
    }
}

fn forward_increments(cov: &CovParams, y: f64, n_paths: usize, substeps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = [0.3, -1.2];
    let mut dims = vec![Vec::with_capacity(n_paths); 2];
    for _ in 0..n_paths {
        let xt = forward_simulate(&x0, y, cov, 1.0, substeps, &mut rng)?;
        for k in 0..2 {
            dims[k].push(xt[k] - x0[k]);
        }
    }
    Ok(dims)
}

pub fn measure_forward_marginal(n_paths: usize, substeps: usize, seed: u64) -> Result<ForwardMarginal> {
    let y = 0.7;
    let cov = forward_cov(1.0);
    let target = sigma_mat(1.0, y, &cov)?;
    let dims = forward_increments(&cov, y, n_paths, substeps, seed)?;
    let mut out = ForwardMarginal {
        target_variance: target.0.clone(),
        empirical_variance: vec![],
        variance_rel_err: vec![],
        mean_std_errors: vec![],
        ks_p: vec![],
        isotropic_p: 0.0,
    };
    for k in 0..2 {
        let v = variance(&dims[k]);
        out.empirical_variance.push(v);
        out.variance_rel_err.push((v / target[k] - 1.0).abs());
        out.mean_std_errors
            .push(mean(&dims[k]).abs() / (v / n_paths as f64).sqrt());
        out.ks_p.push(ks_test_normal(&dims[k], 0.0, target[k].sqrt()).1);
    }
    let iso = forward_increments(&forward_cov(0.0), y, n_paths, substeps, seed ^ 0x5eed)?;
    out.isotropic_p = variance_ratio_test(&iso[0], &iso[1]).1;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectVsForward {
    pub variance_ratio: Vec<f64>,
    pub p_values: Vec<f64>,
}

/// Direct perturbation at `σ = 1` against simulated SDE paths to `t = 1`.
pub fn measure_direct_vs_forward(n: usize, substeps: usize, seed: u64) -> Result<DirectVsForward> {
    let y = 0.7;
    let cov = forward_cov(1.0);
    let sim = forward_increments(&cov, y, n, substeps, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x0 = [0.3, -1.2];
    let mut direct = vec![Vec::with_capacity(n); 2];
    for _ in 0..n {
        let x = direct_perturb(&x0, y, 1.0, &cov, &mut rng)?;
        for k in 0..2 {
            direct[k].push(x[k] - x0[k]);
        }
    }
    let mut out = DirectVsForward {
        variance_ratio: vec![],
        p_values: vec![],
    };
    for k in 0..2 {
        let (r, p) = variance_ratio_test(&direct[k], &sim[k]);
        out.variance_ratio.push(r);
        out.p_values.push(p);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// closed-form denoiser and score

struct Instance {
    samples: Vec<Vec<f64>>,
    labels: Vec<f64>,
    y: f64,
    x: Vec<f64>,
    sigma: Vec<f64>,
    vicinity: VicinityConfig,
}

impl Instance {
    fn draw<R: Rng>(rng: &mut R) -> Instance {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=4);
        let vicinity = if rng.random() {
            VicinityConfig::HardAdaptive {
                n_av: rng.random_range(1..=n),
            }
        } else {
            VicinityConfig::HardFixed {
                kappa: rng.random_range(0.3..1.0),
            }
        };
        Instance {
            samples: (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
            labels: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            y: rng.random_range(0.0..1.0),
            x: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
            sigma: (0..d).map(|_| rng.random_range(0.3..3.0)).collect(),
            vicinity,
        }
    }

    /// Indicator weights computed directly from sorted label distances.
    fn weights(&self) -> Vec<f64> {
        let dist: Vec<f64> = self.labels.iter().map(|l| (l - self.y).abs()).collect();
        let kappa = match self.vicinity {
            VicinityConfig::HardFixed { kappa } => kappa,
            VicinityConfig::HardAdaptive { n_av } => {
                let mut sorted = dist.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                sorted[n_av.min(sorted.len()) - 1]
            }
        };
        dist.iter().map(|&v| if v <= kappa { 1.0 } else { 0.0 }).collect()
    }

    fn gaussian_density(&self, x: &[f64], mu: &[f64]) -> f64 {
        let d = x.len() as f64;
        let det: f64 = self.sigma.iter().product();
        let quad: f64 = x
            .iter()
            .zip(mu)
            .zip(&self.sigma)
            .map(|((a, b), s)| (a - b) * (a - b) / s)
            .sum();
        (2.0 * PI).powf(-d / 2.0) * det.powf(-0.5) * (-0.5 * quad).exp()
    }

    fn closed_form(&self) -> Result<ClosedFormDenoiser> {
        let flat: Vec<f64> = self.samples.iter().flatten().copied().collect();
        let ds = LabeledDataset::from_rows(self.x.len(), flat, self.labels.clone())?;
        ClosedFormDenoiser::new(ds, self.vicinity)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DStarOptimality {
    pub instances: usize,
    pub max_abs_err: f64,
}

/// Minimizes `J(D) = Σ_i w_i Σ_k Λ_k (D_k - x_ik)²` by bisecting each
/// coordinate of its gradient.
fn minimize_weighted_quadratic(w: &[f64], xs: &[Vec<f64>], lambda: &[f64]) -> Vec<f64> {
    let d = lambda.len();
    (0..d)
        .map(|k| {
            let grad = |v: f64| {
                2.0 * lambda[k]
                    * w.iter().zip(xs).map(|(wi, xi)| wi * (v - xi[k])).sum::<f64>()
            };
            let mut lo = xs.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
            let mut hi = xs.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if grad(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

pub fn measure_dstar_optimality(instances: usize, seed: u64) -> Result<DStarOptimality> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let inst = Instance::draw(&mut rng);
        let w: Vec<f64> = inst
            .weights()
            .iter()
            .zip(&inst.samples)
            .map(|(wi, xi)| wi * inst.gaussian_density(&inst.x, xi))
            .collect();
        if w.iter().all(|v| *v == 0.0) {
            continue;
        }
        let lambda = noise_weight(&DiagCov(inst.sigma.clone()), 0.5)?;
        let brute = minimize_weighted_quadratic(&w, &inst.samples, &lambda.0);
        let got = inst
            .closed_form()?
            .denoise(&inst.x, Some(inst.y), &DiagCov(inst.sigma.clone()))?;
        for (a, b) in got.iter().zip(&brute) {
            max_abs_err = max_abs_err.max((a - b).abs());
        }
        done += 1;
    }
    Ok(DStarOptimality {
        instances,
        max_abs_err,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreIdentity {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// `log Σ_i W_i N(x; x_i, Σ) - log Σ_i W_i` in the log domain.
fn log_mixture_density(inst: &Instance, w: &[f64], x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let log_det: f64 = inst.sigma.iter().map(|s| s.ln()).sum();
    let terms: Vec<f64> = w
        .iter()
        .zip(&inst.samples)
        .filter(|(wi, _)| **wi > 0.0)
        .map(|(wi, xi)| {
            let quad: f64 = x
                .iter()
                .zip(xi)
                .zip(&inst.sigma)
                .map(|((a, b), s)| (a - b) * (a - b) / s)
                .sum();
            wi.ln() - 0.5 * d * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad
        })
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
    lse - w.iter().sum::<f64>().ln()
}

pub fn measure_score_identity(probes: usize, seed: u64) -> Result<ScoreIdentity> {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let inst = Instance::draw(&mut rng);
        let w = inst.weights();
        if w.iter().all(|v| *v == 0.0) {
            continue;
        }
        let analytic = vicinal_score(&inst.closed_form()?, &inst.x, inst.y, &DiagCov(inst.sigma.clone()))?;
        let mut fd = Vec::with_capacity(inst.x.len());
        for k in 0..inst.x.len() {
            let mut up = inst.x.clone();
            let mut dn = inst.x.clone();
            up[k] += H;
            dn[k] -= H;
            fd.push((log_mixture_density(&inst, &w, &up) - log_mixture_density(&inst, &w, &dn)) / (2.0 * H));
        }
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let err = analytic
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        max_rel_err = max_rel_err.max(err / scale);
        done += 1;
    }
    Ok(ScoreIdentity {
        probes,
        max_rel_err,
    })
}

// ---------------------------------------------------------------------------
// sampler

#[derive(Debug, Clone, Serialize)]
pub struct HeunOrder {
    pub n_steps: Vec<usize>,
    pub errors: Vec<f64>,
    /// `errors[i] / errors[i + 1]`.
    pub ratios: Vec<f64>,
}

/// Terminal error of the Heun sampler on Gaussian data, where the
/// probability-flow ODE has the closed-form solution
/// `x(t) - m = (x_T - m)·√((s² + Σ(t))/(s² + Σ(T)))`. The reference is that
/// exact state at `t_1 = σ_min` followed by the sampler's own final Euler
/// step, so only the integration error above `σ_min` is measured.
pub fn measure_heun_order(n_steps: &[usize]) -> Result<HeunOrder> {
    let spec = DatasetSpec {
        kind: DatasetKind::GaussianShift {
            direction: vec![1.0, 2.0],
            noise_std: 0.5,
        },
        n_samples: 1,
        d: 2,
        label_range: (0.0, 1.0),
        seed: 0,
    };
    let oracle = AnalyticOracle::new(&spec)?;
    let cov = CovParams {
        lambda_y: 0.8,
        sigma_data: 0.5,
        embedding: EmbeddingSpec::Affine {
            offsets: vec![0.1, 1.2],
            slopes: vec![1.0, -0.5],
        },
    };
    let y = 0.6;
    let m = oracle.mean(y);
    let s2 = oracle.noise_std().powi(2);
    let x_start = [30.0, -50.0];
    let mut errors = Vec::new();
    for &n in n_steps {
        let cfg = SamplerConfig {
            kind: SamplerKind::Ode,
            n_steps: n,
            cfg_gamma: 1.0,
            ..SamplerConfig::default()
        };
        let got = heun_trajectory(&oracle, y, &cov, &cfg, &x_start)?.into_terminal();
        let cond = cov.at_label(y)?;
        let (s_t1, s_tn) = (cond.sigma(cfg.sigma_min)?, cond.sigma(cfg.sigma_max)?);
        let exact_t1: Vec<f64> = (0..2)
            .map(|k| m[k] + (x_start[k] - m[k]) * ((s2 + s_t1[k]) / (s2 + s_tn[k])).sqrt())
            .collect();
        // final Euler step from σ_min to 0
        let sd = cond.sigma_dot(cfg.sigma_min, 1.0)?;
        let d = oracle.denoise(&exact_t1, Some(y), &s_t1)?;
        let reference: Vec<f64> = (0..2)
            .map(|k| exact_t1[k] - cfg.sigma_min * 0.5 * sd[k] / s_t1[k] * (exact_t1[k] - d[k]))
            .collect();
        errors.push(
            got.iter()
                .zip(&reference)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs())),
        );
    }
    let ratios = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(HeunOrder {
        n_steps: n_steps.to_vec(),
        errors,
        ratios,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChurnCollapse {
    pub chains: usize,
    pub max_abs_diff: f64,
}

fn toy_closed_form() -> Result<ClosedFormDenoiser> {
    let labels = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let samples = vec![1.0, 0.5, 1.5, 0.0, 2.0, -0.5, 2.5, -1.0, 3.0, -1.5, 3.5, -2.0];
    let ds = LabeledDataset::from_rows(2, samples, labels)?;
    ClosedFormDenoiser::new(ds, VicinityConfig::HardAdaptive { n_av: 3 })
}

pub fn measure_churn_collapse(chains: usize) -> Result<ChurnCollapse> {
    let cf = toy_closed_form()?;
    let cov = CovParams {
        lambda_y: 0.5,
        sigma_data: 0.5,
        embedding: EmbeddingSpec::Affine {
            offsets: vec![0.1, 1.0],
            slopes: vec![1.0, 0.5],
        },
    };
    let cfg = SamplerConfig {
        s_churn: 0.0,
        cfg_gamma: 1.5,
        ..SamplerConfig::default()
    };
    let mut max_abs_diff: f64 = 0.0;
    for seed in 0..chains as u64 {
        let y = 0.1 + 0.8 * (seed as f64 / chains.max(1) as f64);
        let a = heun_sample(&cf, y, &cov, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let b = stochastic_sample(&cf, y, &cov, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for (u, v) in a.iter().zip(&b) {
            max_abs_diff = max_abs_diff.max((u - v).abs());
        }
    }
    Ok(ChurnCollapse {
        chains,
        max_abs_diff,
    })
}

// ---------------------------------------------------------------------------
// loss weighting and training gradient

#[derive(Debug, Clone, Serialize)]
pub struct LambdaNormalization {
    pub draws: usize,
    pub max_abs_err: f64,
}

pub fn measure_lambda_normalization(draws: usize, seed: u64) -> Result<LambdaNormalization> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err: f64 = 0.0;
    for _ in 0..draws {
        let d = rng.random_range(1..=4);
        let sigma = DiagCov((0..d).map(|_| rng.random_range(-12.0f64..9.0).exp()).collect());
        let sd = rng.random_range(0.05..5.0);
        let lam = noise_weight(&sigma, sd)?;
        let c = precond_coeffs(&sigma, sd)?;
        for (l, co) in lam.iter().zip(&c.c_out) {
            max_abs_err = max_abs_err.max((l * co * co - 1.0).abs());
        }
    }
    Ok(LambdaNormalization { draws, max_abs_err })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub dropped_labels: usize,
    pub null_token_grad_norm: f64,
}

/// Analytic gradient of one fixed vicinal batch against a fourth-order
/// central difference, `[8(f(θ+h) - f(θ-h)) - (f(θ+2h) - f(θ-2h))]/(12h)`.
/// Relative error is `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn measure_gradient(seed: u64) -> Result<GradientCheck> {
    const H: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = DatasetSpec {
        kind: DatasetKind::GaussianShift {
            direction: vec![],
            noise_std: 0.2,
        },
        n_samples: 64,
        d: 2,
        label_range: (0.0, 1.0),
        seed,
    };
    let ds = crate::synthdata::generate(&spec, &mut rng)?;
    let mut td = TrainableDenoiser::new(2, &[8, 8], Activation::Silu, 0.5, (0.0, 1.0), &mut rng)?;
    // a nonzero null token so its gradient path is not trivially at the origin
    let n = td.n_params();
    for v in &mut td.params_mut()[n - LABEL_FEATURES..] {
        *v = rng.random_range(-0.5..0.5);
    }
    let settings = TrainSettings {
        vicinity: VicinityConfig::HardAdaptive { n_av: 8 },
        kde: KdeConfig::rule_of_thumb(ds.labels()),
        cov: CovParams {
            lambda_y: 0.3,
            sigma_data: 0.5,
            embedding: EmbeddingSpec::Affine {
                offsets: vec![0.2, 0.9],
                slopes: vec![0.5, -0.4],
            },
        },
        loss: LossConfig {
            batch_size: 16,
            label_drop_prob: 0.5,
            ..LossConfig::default()
        },
    };
    let batch = draw_vicinal_batch(&ds, &settings, &mut rng)?;
    let (_, grad) = batch_loss_and_grad(&td, &batch, &ds)?;
    let mut max_rel_err: f64 = 0.0;
    for p in 0..n {
        let base = td.params()[p];
        let mut at = |delta: f64| -> Result<f64> {
            td.params_mut()[p] = base + delta;
            batch_loss(&td, &batch, &ds)
        };
        let fd = (8.0 * (at(H)? - at(-H)?) - (at(2.0 * H)? - at(-2.0 * H)?)) / (12.0 * H);
        td.params_mut()[p] = base;
        let a = grad[p];
        max_rel_err = max_rel_err.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    Ok(GradientCheck {
        n_params: n,
        max_rel_err,
        dropped_labels: batch.elements.iter().filter(|e| e.label.is_none()).count(),
        null_token_grad_norm: grad[n - LABEL_FEATURES..]
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt(),
    })
}

// ---------------------------------------------------------------------------
// suite

fn outcome<T: Serialize>(
    check: &'static str,
    f: impl FnOnce() -> Result<T>,
    pass: impl FnOnce(&T) -> bool,
) -> CheckOutcome {
    let start = Instant::now();
    let result = f();
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(m) => CheckOutcome {
            check,
            passed: pass(&m),
            seconds,
            details: serde_json::to_value(&m).expect("measurements serialize"),
        },
        Err(e) => CheckOutcome {
            check,
            passed: false,
            seconds,
            details: serde_json::json!({ "error": e.to_string() }),
        },
    }
}

/// Grid sizes for the convergence study; each halves the spacing of the
/// previous one.
pub const HEUN_STEPS: [usize; 5] = [17, 33, 65, 129, 257];

pub fn run(level: Level) -> Vec<CheckOutcome> {
    let mut out = vec![
        outcome("edm_reduction", || measure_edm_reduction(1), |m| {
            m.sigma_exact && m.max_rel_err <= EDM_REDUCTION_TOL
        }),
        outcome("dstar_optimality", || measure_dstar_optimality(50, 2), |m| {
            m.max_abs_err <= DSTAR_ABS_TOL
        }),
        outcome("score_finite_difference", || measure_score_identity(100, 3), |m| {
            m.max_rel_err <= SCORE_REL_TOL
        }),
        outcome("heun_order", || measure_heun_order(&HEUN_STEPS), |m| {
            m.ratios.len() >= 3
                && m.ratios
                    .iter()
                    .all(|r| *r >= HEUN_RATIO_RANGE.0 && *r <= HEUN_RATIO_RANGE.1)
        }),
        outcome("churn_collapse", || measure_churn_collapse(20), |m| {
            m.max_abs_diff <= CHURN_ABS_TOL
        }),
        outcome("lambda_normalization", || measure_lambda_normalization(1000, 4), |m| {
            m.max_abs_err <= LAMBDA_TOL
        }),
        outcome("gradient_check", || measure_gradient(5), |m| {
            m.max_rel_err <= GRAD_REL_TOL && m.dropped_labels > 0
        }),
    ];
    if level == Level::Full {
        out.push(outcome(
            "forward_marginal",
            || measure_forward_marginal(10_000, 200, 6),
            |m| {
                m.variance_rel_err.iter().all(|e| *e <= VARIANCE_REL_TOL)
                    && m.mean_std_errors.iter().all(|z| *z <= MEAN_STD_ERRORS)
                    && m.ks_p.iter().all(|p| *p > MIN_P_VALUE)
                    && m.isotropic_p > MIN_P_VALUE
            },
        ));
        out.push(outcome(
            "direct_vs_forward",
            || measure_direct_vs_forward(10_000, 200, 7),
            |m| m.p_values.iter().all(|p| *p > MIN_P_VALUE),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisection_minimizer_matches_weighted_mean() {
        let xs = vec![vec![0.0, 1.0], vec![2.0, -1.0]];
        let got = minimize_weighted_quadratic(&[1.0, 3.0], &xs, &[1.0, 5.0]);
        assert!((got[0] - 1.5).abs() < 1e-14 && (got[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn scalar_reference_recovers_single_point() {
        // one data point: the ODE contracts exactly onto it
        let out = scalar_heun_reference(&[2.0], 50.0, 16, 0.002, 80.0, 7.0);
        assert_eq!(out.len(), 17);
        assert!((out[16] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fast_suite_passes() {
        let results = run(Level::Fast);
        assert_eq!(results.len(), 7);
        for r in &results {
            assert!(r.passed, "{}: {}", r.check, r.details);
        }
    }

    #[test]
    fn level_parsing() {
        assert_eq!("fast".parse::<Level>().unwrap(), Level::Fast);
        assert!("slow".parse::<Level>().is_err());
    }
}
