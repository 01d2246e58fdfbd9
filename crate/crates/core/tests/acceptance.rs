//! Acceptance suite. One line per criterion; exits nonzero if any fails.
//!
//! Run with `cargo test --test acceptance` (add `--release` for timings that
//! match a deployed build; the test profile is already optimized).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cedm::config::RunConfig;
use cedm::covariance::DiagCov;
use cedm::dataset::LabeledDataset;
use cedm::denoiser::{ClosedFormDenoiser, Denoiser};
use cedm::eval::{label_consistency, sliding_distance, EvalConfig};
use cedm::sampler::{chain_rng, sample, sample_chains};
use cedm::synthdata::{generate, generate_at_labels, generate_seeded};
use cedm::verify::{
    measure_churn_collapse, measure_dstar_optimality, measure_edm_reduction,
    measure_forward_marginal, measure_gradient, measure_heun_order,
    measure_lambda_normalization, measure_score_identity,
};
use cedm::vicinity::{vicinity_members, VicinityConfig};
use cedm::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EDM_TOL: f64 = 1e-12;
const EDM_SEEDS: u64 = 10;
const FWD_PATHS: usize = 10_000;
const FWD_SUBSTEPS: usize = 200;
const FWD_VAR_REL: f64 = 0.05;
const FWD_MEAN_SE: f64 = 3.0;
const FWD_KS_P: f64 = 0.001;
const DSTAR_INSTANCES: usize = 50;
const DSTAR_TOL: f64 = 1e-8;
const SCORE_PROBES: usize = 100;
const SCORE_TOL: f64 = 1e-5;
const HEUN_STEPS: [usize; 5] = [17, 33, 65, 129, 257];
const HEUN_RATIO: (f64, f64) = (3.0, 5.0);
const HEUN_MIN_HALVINGS: usize = 3;
const CHURN_CHAINS: usize = 20;
const CHURN_TOL: f64 = 1e-12;
const LAMBDA_DRAWS: usize = 1000;
const LAMBDA_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const E2E_RATIO: f64 = 1.5;
const E2E_MAE_REL: f64 = 0.25;
const E2E_REAL_SEED: u64 = 101;
const E2E_LABEL_SEED: u64 = 202;
const TAIL_KAPPA: f64 = 0.001;
const TAIL_LABELS_PER_SIDE: usize = 20;
const TAIL_WIDTH: f64 = 0.1;
const TAIL_CHAINS: usize = 5;
const TAIL_REAL_SEED: u64 = 303;
const AV_GRID: usize = 1000;

struct Verdict {
    passed: bool,
    detail: String,
}

fn config(name: &str) -> Result<RunConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path)
}

fn criterion(
    id: usize,
    name: &str,
    limit_s: f64,
    body: impl FnOnce() -> Result<Verdict>,
) -> bool {
    let start = Instant::now();
    let verdict = body();
    let secs = start.elapsed().as_secs_f64();
    let (passed, detail) = match verdict {
        Ok(v) => (v.passed && secs < limit_s, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "[{}] C{id:<2} {name}: {detail}; {secs:.2}s (limit {limit_s}s)",
        if passed { "PASS" } else { "FAIL" }
    );
    passed
}

fn c1_edm_reduction() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for seed in 0..EDM_SEEDS {
        let m = measure_edm_reduction(seed)?;
        worst = worst.max(m.max_rel_err);
        exact &= m.sigma_exact;
    }
    Ok(Verdict {
        passed: exact && worst <= EDM_TOL,
        detail: format!("Sigma == sigma^2 I: {exact}, max rel err {worst:.2e} over {EDM_SEEDS} trajectories (tol {EDM_TOL:e})"),
    })
}

fn c2_forward_marginal() -> Result<Verdict> {
    let m = measure_forward_marginal(FWD_PATHS, FWD_SUBSTEPS, 6)?;
    let passed = m.variance_rel_err.iter().all(|e| *e <= FWD_VAR_REL)
        && m.mean_std_errors.iter().all(|z| *z <= FWD_MEAN_SE)
        && m.ks_p.iter().all(|p| *p > FWD_KS_P);
    Ok(Verdict {
        passed,
        detail: format!(
            "var rel err {:.4?} (tol {FWD_VAR_REL}), |mean|/se {:.2?} (tol {FWD_MEAN_SE}), KS p {:.3?} (> {FWD_KS_P})",
            m.variance_rel_err, m.mean_std_errors, m.ks_p
        ),
    })
}

fn c3_dstar() -> Result<Verdict> {
    let m = measure_dstar_optimality(DSTAR_INSTANCES, 2)?;
    Ok(Verdict {
        passed: m.instances == DSTAR_INSTANCES && m.max_abs_err <= DSTAR_TOL,
        detail: format!("{} instances, max abs err {:.2e} (tol {DSTAR_TOL:e})", m.instances, m.max_abs_err),
    })
}

fn c4_score() -> Result<Verdict> {
    let m = measure_score_identity(SCORE_PROBES, 3)?;
    Ok(Verdict {
        passed: m.probes == SCORE_PROBES && m.max_rel_err <= SCORE_TOL,
        detail: format!("{} probes, max rel err {:.2e} (tol {SCORE_TOL:e})", m.probes, m.max_rel_err),
    })
}

fn c5_heun_order() -> Result<Verdict> {
    let m = measure_heun_order(&HEUN_STEPS)?;
    let passed = m.ratios.len() >= HEUN_MIN_HALVINGS
        && m.ratios.iter().all(|r| (HEUN_RATIO.0..=HEUN_RATIO.1).contains(r));
    Ok(Verdict {
        passed,
        detail: format!(
            "steps {:?}, errors [{}], ratios {:.3?} (range {HEUN_RATIO:?})",
            m.n_steps,
            m.errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", "),
            m.ratios
        ),
    })
}

fn c6_churn() -> Result<Verdict> {
    let m = measure_churn_collapse(CHURN_CHAINS)?;
    Ok(Verdict {
        passed: m.max_abs_diff <= CHURN_TOL,
        detail: format!("{} chains, max |sde - ode| {:.2e} (tol {CHURN_TOL:e})", m.chains, m.max_abs_diff),
    })
}

fn c7_lambda() -> Result<Verdict> {
    let m = measure_lambda_normalization(LAMBDA_DRAWS, 4)?;
    Ok(Verdict {
        passed: m.draws == LAMBDA_DRAWS && m.max_abs_err <= LAMBDA_TOL,
        detail: format!("{} draws, max |Lambda c_out^2 - 1| {:.2e} (tol {LAMBDA_TOL:e})", m.draws, m.max_abs_err),
    })
}

fn c8_gradient() -> Result<Verdict> {
    let m = measure_gradient(5)?;
    Ok(Verdict {
        passed: m.max_rel_err <= GRAD_TOL && m.dropped_labels > 0,
        detail: format!(
            "{} params, max rel err {:.2e} (tol {GRAD_TOL:e}), {} dropped labels, null-token grad norm {:.3}",
            m.n_params, m.max_rel_err, m.dropped_labels, m.null_token_grad_norm
        ),
    })
}

fn c9_end_to_end() -> Result<Verdict> {
    let cfg = config("gaussian_shift.toml")?;
    let train = generate_seeded(&cfg.dataset)?;
    let den = ClosedFormDenoiser::new(train, cfg.vicinity)?;
    let eval = cfg.eval_config();
    let n = cfg.dataset.n_samples;

    let real = generate(&cfg.dataset, &mut ChaCha8Rng::seed_from_u64(E2E_REAL_SEED))?;
    let reference = generate(&cfg.dataset, &mut ChaCha8Rng::seed_from_u64(E2E_LABEL_SEED))?;
    let baseline = sliding_distance(&real, &reference, &eval)?
        .mean_distance
        .ok_or_else(|| Error::Domain("baseline: every window starved".into()))?;

    let rows = sample_chains(&den, reference.labels(), 1, &cfg.cov_sample(), &cfg.sampler_with(None), cfg.seed)?;
    let generated = rows_to_dataset(&rows, cfg.dataset.d, cfg.dataset.label_range)?;
    let sliding = sliding_distance(&real, &generated, &eval)?;
    let gen_dist = sliding
        .mean_distance
        .ok_or_else(|| Error::Domain("generated: every window starved".into()))?;

    let mae = label_consistency(&generated, &cfg.dataset)?;
    let floor = cfg.dataset.noise_std() * (2.0 / std::f64::consts::PI).sqrt();
    let ratio = gen_dist / baseline;
    let mae_rel = (mae - floor).abs() / floor;
    Ok(Verdict {
        passed: ratio <= E2E_RATIO && mae_rel <= E2E_MAE_REL && sliding.starved_centers.is_empty(),
        detail: format!(
            "{} centers, n = {n}: W1 gen {gen_dist:.4} / baseline {baseline:.4} (seeds real {E2E_REAL_SEED}, ref {E2E_LABEL_SEED}) = {ratio:.3} (<= {E2E_RATIO}); label MAE {mae:.4} vs floor {floor:.4}, rel dev {mae_rel:.3} (<= {E2E_MAE_REL})",
            eval.centers.len()
        ),
    })
}

fn rows_to_dataset(rows: &[(f64, Vec<f64>)], d: usize, range: (f64, f64)) -> Result<LabeledDataset> {
    let labels = rows.iter().map(|r| r.0).collect();
    let samples = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    LabeledDataset::new(d, samples, labels, range)
}

/// Routes every call to the unconditional branch.
struct Unconditional<'a>(&'a ClosedFormDenoiser);

impl Denoiser for Unconditional<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn denoise(&self, x: &[f64], _label: Option<f64>, sigma: &DiagCov) -> Result<Vec<f64>> {
        self.0.denoise(x, None, sigma)
    }
}

fn c10_adaptive_vicinity() -> Result<Verdict> {
    let cfg = config("imbalanced_shift.toml")?;
    let VicinityConfig::HardAdaptive { n_av } = cfg.vicinity else {
        return Err(Error::Config("imbalanced_shift.toml must use an adaptive vicinity".into()));
    };
    let train = generate_seeded(&cfg.dataset)?;
    let (lo, hi) = cfg.dataset.label_range;
    let fixed = VicinityConfig::HardFixed { kappa: TAIL_KAPPA };

    let mut av_min = usize::MAX;
    for k in 0..AV_GRID {
        let y = lo + (hi - lo) * k as f64 / (AV_GRID - 1) as f64;
        av_min = av_min.min(vicinity_members(train.labels(), y, &cfg.vicinity)?.len());
    }

    let span = TAIL_WIDTH * (hi - lo);
    let step = span / (TAIL_LABELS_PER_SIDE - 1) as f64;
    let tails: Vec<f64> = (0..TAIL_LABELS_PER_SIDE)
        .map(|k| lo + step * k as f64)
        .chain((0..TAIL_LABELS_PER_SIDE).map(|k| hi - span + step * k as f64))
        .collect();

    let cov = cfg.cov_sample();
    let sampler = cfg.sampler_with(None);
    let av = ClosedFormDenoiser::new(train.clone(), cfg.vicinity)?;
    let av_rows = sample_chains(&av, &tails, TAIL_CHAINS, &cov, &sampler, cfg.seed)?;
    let av_mae = label_consistency(&rows_to_dataset(&av_rows, cfg.dataset.d, (lo, hi))?, &cfg.dataset)?;

    let fv = ClosedFormDenoiser::new(train, fixed)?;
    let fallback = Unconditional(&fv);
    let mut fv_rows = Vec::new();
    let mut fv_served = Vec::new();
    let mut starved_labels = Vec::new();
    for (li, &y) in tails.iter().enumerate() {
        for ci in 0..TAIL_CHAINS {
            match sample(&fv, y, &cov, &sampler, &mut chain_rng(cfg.seed, li, ci)) {
                Ok(x) => {
                    fv_served.push((y, x.clone()));
                    fv_rows.push((y, x));
                }
                Err(Error::EmptyVicinity { .. }) => {
                    if ci == 0 {
                        starved_labels.push(y);
                    }
                    let x = sample(&fallback, y, &cov, &sampler, &mut chain_rng(cfg.seed, li, ci))?;
                    fv_rows.push((y, x));
                }
                Err(e) => return Err(e),
            }
        }
    }
    let fv_mae = label_consistency(&rows_to_dataset(&fv_rows, cfg.dataset.d, (lo, hi))?, &cfg.dataset)?;

    // Windows narrower than the label spacing: each holds exactly one tail label.
    let real_labels: Vec<f64> = tails.iter().flat_map(|&y| std::iter::repeat_n(y, TAIL_CHAINS)).collect();
    let real = generate_at_labels(&cfg.dataset, &real_labels, &mut ChaCha8Rng::seed_from_u64(TAIL_REAL_SEED))?;
    let eval = EvalConfig {
        centers: tails.clone(),
        window: 0.4 * step,
        ..cfg.eval_config()
    };
    let starved_windows = if fv_served.is_empty() {
        tails.len()
    } else {
        let served = rows_to_dataset(&fv_served, cfg.dataset.d, (lo, hi))?;
        sliding_distance(&real, &served, &eval)?.starved_centers.len()
    };

    let passed = av_min >= n_av
        && av_mae <= fv_mae
        && !starved_labels.is_empty()
        && starved_windows == starved_labels.len();
    Ok(Verdict {
        passed,
        detail: format!(
            "tail MAE AV(n_av={n_av}) {av_mae:.4} <= FV(kappa={TAIL_KAPPA}) {fv_mae:.4}; FV starved {}/{} tail labels, {starved_windows} starved eval windows flagged; min AV vicinity over {AV_GRID} labels = {av_min}",
            starved_labels.len(),
            tails.len()
        ),
    })
}

fn main() -> ExitCode {
    let results = [
        criterion(1, "EDM reduction", 1.0, c1_edm_reduction),
        criterion(2, "forward marginal Monte Carlo", 30.0, c2_forward_marginal),
        criterion(3, "closed-form denoiser optimality", 5.0, c3_dstar),
        criterion(4, "vicinal score identity", 5.0, c4_score),
        criterion(5, "Heun convergence order", 30.0, c5_heun_order),
        criterion(6, "churn collapse", 1.0, c6_churn),
        criterion(7, "noise-weight normalization", 1.0, c7_lambda),
        criterion(8, "training gradient", 10.0, c8_gradient),
        criterion(9, "end-to-end closed-form generation", 120.0, c9_end_to_end),
        criterion(10, "adaptive vicinity benefit", 120.0, c10_adaptive_vicinity),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
