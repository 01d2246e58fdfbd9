//! Small statistical helpers used by the verification checks.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Pearson chi-squared p-value for `counts` against a uniform distribution
/// over the cells.
pub fn chi_squared_uniform_p_value(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = vec![total as f64 / counts.len() as f64; counts.len()];
    chi_squared_p_value(counts, &expected)
}

/// Pearson chi-squared p-value for observed counts against expected counts.
pub fn chi_squared_p_value(counts: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(counts.len(), expected.len());
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dof = (counts.len() - 1) as f64;
    let chi = ChiSquared::new(dof).expect("at least two cells");
    1.0 - chi.cdf(stat)
}

/// One-sample Kolmogorov–Smirnov test of `xs` against `N(mean, sd²)`.
/// Returns `(D, p)` using the asymptotic Kolmogorov distribution with
/// Stephens' small-sample correction.
pub fn ks_test_normal(xs: &[f64], mean: f64, sd: f64) -> (f64, f64) {
    let normal = Normal::new(mean, sd).expect("sd > 0");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = normal.cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sqrt_n = n.sqrt();
    (d, kolmogorov_survival((sqrt_n + 0.12 + 0.11 / sqrt_n) * d))
}

/// Two-sample variance ratio F statistic `var(a) / var(b)` with its two-sided
/// p-value.
pub fn variance_ratio_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    use statrs::distribution::FisherSnedecor;
    let ratio = variance(a) / variance(b);
    let f = FisherSnedecor::new(a.len() as f64 - 1.0, b.len() as f64 - 1.0)
        .expect("at least two samples each");
    let lower = f.cdf(ratio);
    (ratio, (2.0 * lower.min(1.0 - lower)).min(1.0))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
