//! Time grid, deterministic Heun sampler, EDM-style stochastic sampler,
//! classifier-free guidance, and forward simulation of the noising SDE.
//!
//! During sampling the noise schedule is `σ(t) = t`, so `σ̇ = 1` and the
//! probability-flow slope is `½·Σ̇(t)∘Σ(t)^{-1}∘(x - D(x, y, Σ(t)))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CondCov, CovParams, DiagCov};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};

/// Entries of `Σ` below this are treated as singular.
const MIN_INVERTIBLE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic Heun integration of the probability-flow ODE.
    Ode,
    /// Heun with per-step noise churn.
    Sde,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(SamplerKind::Ode),
            "sde" => Ok(SamplerKind::Sde),
            other => Err(Error::config(format!(
                "unknown sampler '{other}', expected 'ode' or 'sde'"
            ))),
        }
    }
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ode => "ode",
            SamplerKind::Sde => "sde",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub s_noise: f64,
    pub cfg_gamma: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Sde,
            n_steps: 32,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            s_churn: 80.0,
            s_tmin: 0.05,
            s_tmax: 50.0,
            s_noise: 1.003,
            cfg_gamma: 1.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("sampler: {m}")));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite())
        {
            return fail("need 0 < sigma_min < sigma_max");
        }
        if self.n_steps < 2 {
            return fail("n_steps must be >= 2");
        }
        if !(self.rho > 0.0) {
            return fail("rho must be > 0");
        }
        if !(self.s_noise > 0.0) {
            return fail("s_noise must be > 0");
        }
        if !(self.s_churn >= 0.0) {
            return fail("s_churn must be >= 0");
        }
        if !(self.s_tmin < self.s_tmax) {
            return fail("need s_tmin < s_tmax");
        }
        if !(self.cfg_gamma >= 1.0) || !self.cfg_gamma.is_finite() {
            return fail("cfg_gamma must be >= 1");
        }
        Ok(())
    }

    /// Churn factor `γ_i = min(S_churn/N, √2 - 1)·1{t_i ∈ [S_tmin, S_tmax]}`.
    pub fn churn(&self, t: f64) -> f64 {
        if t >= self.s_tmin && t <= self.s_tmax {
            (self.s_churn / self.n_steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }
}

/// `0 = t_0 < t_1 = σ_min < ... < t_N = σ_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// ρ-power spacing:
/// `t_i = (σ_max^{1/ρ} + (N-i)/(N-1)·(σ_min^{1/ρ} - σ_max^{1/ρ}))^ρ` for
/// `i = 1..=N`, with `t_0 = 0`. The endpoints are pinned exactly.
pub fn time_grid(cfg: &SamplerConfig) -> Result<TimeGrid> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let inv = 1.0 / cfg.rho;
    let (a, b) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut times = Vec::with_capacity(n + 1);
    times.push(0.0);
    for i in 1..=n {
        let t = if i == 1 {
            cfg.sigma_min
        } else if i == n {
            cfg.sigma_max
        } else {
            let frac = (n - i) as f64 / (n - 1) as f64;
            (a + frac * (b - a)).powf(cfg.rho)
        };
        times.push(t);
    }
    Ok(TimeGrid { times })
}

/// Classifier-free guidance: `D_u + γ·(D_c - D_u)`. With `γ = 1` the
/// conditional output is returned unchanged and the unconditional branch is
/// never evaluated.
pub fn cfg_denoise<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    y: f64,
    sigma: &DiagCov,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !(gamma >= 1.0) {
        return Err(Error::domain(format!("guidance scale must be >= 1, got {gamma}")));
    }
    let cond = denoiser.denoise(x, Some(y), sigma)?;
    if gamma == 1.0 {
        return Ok(cond);
    }
    let uncond = denoiser.denoise(x, None, sigma)?;
    Ok(combine_guidance(&cond, &uncond, gamma))
}

pub fn combine_guidance(cond: &[f64], uncond: &[f64], gamma: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| u + gamma * (c - u))
        .collect()
}

/// States visited by a sampler, from `t_N` down to `t_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn into_terminal(mut self) -> Vec<f64> {
        self.states.pop().expect("trajectory has at least one state")
    }
}

fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `x_N ~ N(0, Σ(t_N, y))`.
pub fn initial_noise<R: Rng + ?Sized>(
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sigma = cov.at_label(y)?.sigma(cfg.sigma_max)?;
    Ok(sigma
        .iter()
        .zip(standard_normal_vec(sigma.len(), rng))
        .map(|(s, z)| s.sqrt() * z)
        .collect())
}

struct Stepper<'a, D: ?Sized> {
    denoiser: &'a D,
    y: f64,
    cond: CondCov,
    gamma: f64,
}

impl<D: Denoiser + ?Sized> Stepper<'_, D> {
    /// `½·Σ̇(t)∘Σ(t)^{-1}∘(x - D(x, y, Σ(t)))`
    fn slope(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let sigma = self.cond.sigma(t)?;
        if sigma.iter().any(|s| *s < MIN_INVERTIBLE) {
            return Err(Error::domain(format!("Σ({t}) is numerically singular")));
        }
        let sigma_dot = self.cond.sigma_dot(t, 1.0)?;
        let denoised = cfg_denoise(self.denoiser, x, self.y, &sigma, self.gamma)?;
        Ok(x.iter()
            .zip(&denoised)
            .zip(sigma.iter().zip(sigma_dot.iter()))
            .map(|((xi, di), (s, sd))| 0.5 * sd / s * (xi - di))
            .collect())
    }

    /// One Euler predictor plus trapezoidal corrector from `t_from` to
    /// `t_to`; the corrector is skipped when `t_to = 0`.
    fn heun_step(&self, x: &[f64], t_from: f64, t_to: f64) -> Result<Vec<f64>> {
        let h = t_to - t_from;
        let d_i = self.slope(x, t_from)?;
        let euler: Vec<f64> = x.iter().zip(&d_i).map(|(xi, di)| xi + h * di).collect();
        if t_to == 0.0 {
            return Ok(euler);
        }
        let d_next = self.slope(&euler, t_to)?;
        Ok(x.iter()
            .zip(d_i.iter().zip(&d_next))
            .map(|(xi, (a, b))| xi + h * (0.5 * a + 0.5 * b))
            .collect())
    }
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: "sampler state".into(),
        })
    }
}

fn stepper<'a, D: Denoiser + ?Sized>(
    denoiser: &'a D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    x_init: &[f64],
) -> Result<Stepper<'a, D>> {
    cfg.validate()?;
    let cond = cov.at_label(y)?;
    if x_init.len() != cond.dim() || denoiser.dim() != cond.dim() {
        return Err(Error::domain(format!(
            "dimension mismatch: x_init {}, covariance {}, denoiser {}",
            x_init.len(),
            cond.dim(),
            denoiser.dim()
        )));
    }
    Ok(Stepper {
        denoiser,
        y,
        cond,
        gamma: cfg.cfg_gamma,
    })
}

/// Deterministic Heun sampler started from a given `x_N`.
pub fn heun_trajectory<D: Denoiser + ?Sized>(
    denoiser: &D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    x_init: &[f64],
) -> Result<Trajectory> {
    let st = stepper(denoiser, y, cov, cfg, x_init)?;
    let grid = time_grid(cfg)?;
    let n = grid.n_steps();
    let mut traj = Trajectory {
        times: vec![grid.times[n]],
        states: vec![x_init.to_vec()],
    };
    let mut x = x_init.to_vec();
    for i in (1..=n).rev() {
        x = st.heun_step(&x, grid.times[i], grid.times[i - 1])?;
        check_finite(&x, i)?;
        traj.times.push(grid.times[i - 1]);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

/// Deterministic Heun sampler: draws `x_N ~ N(0, Σ(t_N, y))` and integrates
/// the probability-flow ODE down to `t = 0`.
pub fn heun_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let x_init = initial_noise(y, cov, cfg, rng)?;
    Ok(heun_trajectory(denoiser, y, cov, cfg, &x_init)?.into_terminal())
}

/// Stochastic sampler started from a given `x_N`. Per step, noise is first
/// raised from `t_i` to `t̂_i = (1 + γ_i)·t_i` by adding
/// `(Σ(t̂_i) - Σ(t_i))^{1/2}∘ε_i`, `ε_i ~ N(0, S_noise²·I)`, then one Heun step
/// runs from `t̂_i` to `t_{i-1}`. `ε_i` is drawn even when `γ_i = 0`.
pub fn stochastic_trajectory<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    x_init: &[f64],
    rng: &mut R,
) -> Result<Trajectory> {
    let st = stepper(denoiser, y, cov, cfg, x_init)?;
    let grid = time_grid(cfg)?;
    let n = grid.n_steps();
    let mut traj = Trajectory {
        times: vec![grid.times[n]],
        states: vec![x_init.to_vec()],
    };
    let mut x = x_init.to_vec();
    for i in (1..=n).rev() {
        let t = grid.times[i];
        let eps = standard_normal_vec(x.len(), rng);
        let t_hat = t + cfg.churn(t) * t;
        let before = st.cond.sigma(t)?;
        let after = st.cond.sigma(t_hat)?;
        let mut x_hat = Vec::with_capacity(x.len());
        for k in 0..x.len() {
            let gap = after[k] - before[k];
            if gap < 0.0 {
                return Err(Error::domain(format!(
                    "Σ decreases from t = {t} to t̂ = {t_hat} in entry {k}"
                )));
            }
            x_hat.push(x[k] + gap.sqrt() * (cfg.s_noise * eps[k]));
        }
        x = st.heun_step(&x_hat, t_hat, grid.times[i - 1])?;
        check_finite(&x, i)?;
        traj.times.push(grid.times[i - 1]);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

pub fn stochastic_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let x_init = initial_noise(y, cov, cfg, rng)?;
    Ok(stochastic_trajectory(denoiser, y, cov, cfg, &x_init, rng)?.into_terminal())
}

/// Runs the sampler selected by `cfg.kind`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match cfg.kind {
        SamplerKind::Ode => heun_sample(denoiser, y, cov, cfg, rng),
        SamplerKind::Sde => stochastic_sample(denoiser, y, cov, cfg, rng),
    }
}

/// Full trajectory of the sampler selected by `cfg.kind`.
pub fn sample_trajectory<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    y: f64,
    cov: &CovParams,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let x_init = initial_noise(y, cov, cfg, rng)?;
    match cfg.kind {
        SamplerKind::Ode => heun_trajectory(denoiser, y, cov, cfg, &x_init),
        SamplerKind::Sde => stochastic_trajectory(denoiser, y, cov, cfg, &x_init, rng),
    }
}

/// RNG of one sampling chain: the global seed selects the key, the pair
/// (label index, chain index) selects the stream. Any subset of chains can
/// therefore be regenerated on its own.
pub fn chain_rng(seed: u64, label_index: usize, chain_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label_index as u64) << 32) | (chain_index as u64 & 0xffff_ffff));
    rng
}

/// `per_label` independent chains at every label, run in parallel. Output is
/// label-major: all chains of `labels[0]` first.
pub fn sample_chains<D: Denoiser + ?Sized>(
    denoiser: &D,
    labels: &[f64],
    per_label: usize,
    cov: &CovParams,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    (0..labels.len() * per_label)
        .into_par_iter()
        .map(|k| {
            let (li, ci) = (k / per_label, k % per_label);
            let mut rng = chain_rng(seed, li, ci);
            sample(denoiser, labels[li], cov, cfg, &mut rng).map(|x| (labels[li], x))
        })
        .collect()
}

/// Euler–Maruyama path of `dX = G(t, y) dB` with `σ(t) = t`, from `t = 0` to
/// `t_end` in `n_substeps` equal steps. `G` is evaluated at the left end of
/// each substep.
pub fn forward_simulate<R: Rng + ?Sized>(
    x0: &[f64],
    y: f64,
    cov: &CovParams,
    t_end: f64,
    n_substeps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_substeps == 0 {
        return Err(Error::domain("forward simulation needs at least one substep"));
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::domain(format!("t_end must be > 0, got {t_end}")));
    }
    let cond = cov.at_label(y)?;
    if x0.len() != cond.dim() {
        return Err(Error::domain("x0 dimension does not match covariance"));
    }
    let dt = t_end / n_substeps as f64;
    let sqrt_dt = dt.sqrt();
    let mut x = x0.to_vec();
    for k in 0..n_substeps {
        let g = cond.g(k as f64 * dt, 1.0)?;
        for (xi, gi) in x.iter_mut().zip(g.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *xi += gi * sqrt_dt * z;
        }
    }
    Ok(x)
}

/// `x̃ = x_0 + Σ(σ, y)^{1/2}∘ε` for a given standard-normal `ε`.
pub fn direct_perturb_with_noise(
    x0: &[f64],
    y: f64,
    sigma: f64,
    cov: &CovParams,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let s = cov.at_label(y)?.sigma(sigma)?;
    if x0.len() != s.len() || eps.len() != s.len() {
        return Err(Error::domain("dimension mismatch in direct perturbation"));
    }
    Ok(x0
        .iter()
        .zip(s.iter())
        .zip(eps)
        .map(|((x, s), e)| x + s.sqrt() * e)
        .collect())
}

pub fn direct_perturb<R: Rng + ?Sized>(
    x0: &[f64],
    y: f64,
    sigma: f64,
    cov: &CovParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps = standard_normal_vec(x0.len(), rng);
    direct_perturb_with_noise(x0, y, sigma, cov, &eps)
}
