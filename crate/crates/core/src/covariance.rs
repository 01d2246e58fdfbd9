//! Condition-specific diagonal covariance family.
//!
//! For a noise level `σ`, its time derivative `σ̇` and a label `y`, the family is
//!
//! ```text
//! Σ_ii(σ, y)  = σ² + λ_y·h̃_i(y)·σ
//! Σ̇_ii(σ, y)  = 2σ̇σ + λ_y·h̃_i(y)·σ̇
//! g_i(σ, y)   = sqrt(Σ̇_ii)
//! ```
//!
//! where `h̃_i(y) = exp(-h_i(y)) ∈ (0, 1]` squashes a non-negative label
//! embedding. All matrices are diagonal and stored as length-`d` vectors.
//! With `λ_y = 0` the family collapses to the isotropic `σ²·I` schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal of a diagonal matrix (`Σ`, `Σ̇`, `G`, `Σ^{1/2}`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagCov(pub Vec<f64>);

impl DiagCov {
    pub fn filled(d: usize, value: f64) -> Self {
        DiagCov(vec![value; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Fails unless every entry is strictly positive (required wherever `Σ^{-1}`
    /// or `ln Σ` is taken).
    pub fn ensure_positive(&self) -> Result<()> {
        match self.0.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            Some(i) => Err(Error::domain(format!(
                "covariance entry {i} is {} (must be finite and > 0)",
                self.0[i]
            ))),
            None => Ok(()),
        }
    }
}

impl std::ops::Index<usize> for DiagCov {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Non-negative per-dimension label embedding `h(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding(pub Vec<f64>);

impl LabelEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Parametric stand-in for a learned covariance embedding network.
///
/// * `constant`:   `h_i(y) = a_i`
/// * `affine`:     `h_i(y) = a_i + b_i·y`
/// * `sinusoidal`: `h_i(y) = a_i + b_i·sin(ω_i·y)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSpec {
    Constant {
        offsets: Vec<f64>,
    },
    Affine {
        offsets: Vec<f64>,
        slopes: Vec<f64>,
    },
    Sinusoidal {
        offsets: Vec<f64>,
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
    },
}

impl EmbeddingSpec {
    /// All-zero embedding: `h̃ = 1` in every dimension.
    pub fn zeros(d: usize) -> Self {
        EmbeddingSpec::Constant {
            offsets: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSpec::Constant { offsets }
            | EmbeddingSpec::Affine { offsets, .. }
            | EmbeddingSpec::Sinusoidal { offsets, .. } => offsets.len(),
        }
    }

    /// Checks shapes, and non-negativity of the embedding over `label_range`.
    pub fn validate(&self, d: usize, label_range: (f64, f64)) -> Result<()> {
        if d == 0 {
            return Err(Error::config("embedding dimension must be >= 1"));
        }
        let lens: Vec<usize> = match self {
            EmbeddingSpec::Constant { offsets } => vec![offsets.len()],
            EmbeddingSpec::Affine { offsets, slopes } => vec![offsets.len(), slopes.len()],
            EmbeddingSpec::Sinusoidal {
                offsets,
                amplitudes,
                frequencies,
            } => vec![offsets.len(), amplitudes.len(), frequencies.len()],
        };
        if lens.iter().any(|&n| n != d) {
            return Err(Error::config(format!(
                "embedding parameter lengths {lens:?} do not match dimension {d}"
            )));
        }
        let (lo, hi) = label_range;
        match self {
            EmbeddingSpec::Constant { .. } => {
                embed_label(lo, self, d)?;
            }
            // Affine is monotone per entry: the endpoints bound it.
            EmbeddingSpec::Affine { .. } => {
                embed_label(lo, self, d)?;
                embed_label(hi, self, d)?;
            }
            EmbeddingSpec::Sinusoidal {
                offsets,
                amplitudes,
                ..
            } => {
                if let Some(i) = offsets
                    .iter()
                    .zip(amplitudes)
                    .position(|(a, b)| *a < b.abs())
                {
                    return Err(Error::config(format!(
                        "sinusoidal embedding entry {i} can go negative (offset < |amplitude|)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evaluates the label embedding `h(y)`.
pub fn embed_label(y: f64, spec: &EmbeddingSpec, d: usize) -> Result<LabelEmbedding> {
    if d == 0 {
        return Err(Error::config("embedding dimension must be >= 1"));
    }
    if spec.dim() != d {
        return Err(Error::config(format!(
            "embedding spec has dimension {} but data dimension is {d}",
            spec.dim()
        )));
    }
    let values: Vec<f64> = match spec {
        EmbeddingSpec::Constant { offsets } => offsets.clone(),
        EmbeddingSpec::Affine { offsets, slopes } => offsets
            .iter()
            .zip(slopes)
            .map(|(a, b)| a + b * y)
            .collect(),
        EmbeddingSpec::Sinusoidal {
            offsets,
            amplitudes,
            frequencies,
        } => offsets
            .iter()
            .zip(amplitudes)
            .zip(frequencies)
            .map(|((a, b), w)| a + b * (w * y).sin())
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::config(format!(
            "embedding entry {i} is {} at label {y} (must be >= 0)",
            values[i]
        )));
    }
    Ok(LabelEmbedding(values))
}

/// Element-wise `exp(-h_i)`, mapping `[0, ∞)` into `(0, 1]`.
pub fn squash_embedding(h: &LabelEmbedding) -> Vec<f64> {
    h.0.iter().map(|v| (-v).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    /// Condition strength `λ_y`.
    pub lambda_y: f64,
    pub sigma_data: f64,
    pub embedding: EmbeddingSpec,
}

impl CovParams {
    /// Plain EDM schedule (`λ_y = 0`) in dimension `d`.
    pub fn isotropic(d: usize, sigma_data: f64) -> Self {
        CovParams {
            lambda_y: 0.0,
            sigma_data,
            embedding: EmbeddingSpec::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_y >= 0.0) || !self.lambda_y.is_finite() {
            return Err(Error::config(format!(
                "lambda_y must be finite and >= 0, got {}",
                self.lambda_y
            )));
        }
        if !(self.sigma_data > 0.0) || !self.sigma_data.is_finite() {
            return Err(Error::config(format!(
                "sigma_data must be finite and > 0, got {}",
                self.sigma_data
            )));
        }
        Ok(())
    }

    /// Binds the parameters to a label, precomputing `λ_y·h̃(y)`.
    pub fn at_label(&self, y: f64) -> Result<CondCov> {
        self.validate()?;
        let h = embed_label(y, &self.embedding, self.dim())?;
        let tilde = squash_embedding(&h);
        let weight = tilde.iter().map(|t| self.lambda_y * t).collect();
        Ok(CondCov { weight })
    }
}

/// The covariance family at a fixed label. `weight[i] = λ_y·h̃_i(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondCov {
    weight: Vec<f64>,
}

impl CondCov {
    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    /// `Σ(σ, y)`; rejects `σ <= 0` since `Σ(0, y) = 0` is singular.
    pub fn sigma(&self, sigma: f64) -> Result<DiagCov> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!(
                "noise level must be finite and > 0, got {sigma}"
            )));
        }
        let s2 = sigma * sigma;
        Ok(DiagCov(self.weight.iter().map(|w| s2 + w * sigma).collect()))
    }

    /// `Σ̇(σ, y)` for a schedule with derivative `sigma_dot`.
    pub fn sigma_dot(&self, sigma: f64, sigma_dot: f64) -> Result<DiagCov> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!(
                "noise level must be finite and > 0, got {sigma}"
            )));
        }
        Ok(DiagCov(self.sigma_dot_unchecked(sigma, sigma_dot)))
    }

    fn sigma_dot_unchecked(&self, sigma: f64, sigma_dot: f64) -> Vec<f64> {
        let base = 2.0 * sigma_dot * sigma;
        self.weight.iter().map(|w| base + w * sigma_dot).collect()
    }

    /// Diffusion coefficient `G = Σ̇^{1/2}`. Also defined at `σ = 0` (the
    /// start of the forward SDE) as long as every radicand is non-negative.
    pub fn g(&self, sigma: f64, sigma_dot: f64) -> Result<DiagCov> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!(
                "noise level must be finite and >= 0, got {sigma}"
            )));
        }
        let radicand = self.sigma_dot_unchecked(sigma, sigma_dot);
        if let Some(i) = radicand.iter().position(|r| !(*r >= 0.0)) {
            return Err(Error::domain(format!(
                "diffusion radicand {i} is {} (sigma_dot has the wrong sign?)",
                radicand[i]
            )));
        }
        Ok(DiagCov(radicand.into_iter().map(f64::sqrt).collect()))
    }
}

pub fn sigma_mat(sigma: f64, y: f64, p: &CovParams) -> Result<DiagCov> {
    p.at_label(y)?.sigma(sigma)
}

pub fn sigma_dot_mat(sigma: f64, sigma_dot: f64, y: f64, p: &CovParams) -> Result<DiagCov> {
    p.at_label(y)?.sigma_dot(sigma, sigma_dot)
}

pub fn g_coeff(sigma: f64, sigma_dot: f64, y: f64, p: &CovParams) -> Result<DiagCov> {
    p.at_label(y)?.g(sigma, sigma_dot)
}

/// Entry-wise square root of a diagonal matrix with non-negative entries.
pub fn sigma_sqrt(s: &DiagCov) -> Result<DiagCov> {
    if let Some(i) = s.0.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::domain(format!(
            "cannot take square root of entry {i} = {}",
            s.0[i]
        )));
    }
    Ok(DiagCov(s.0.iter().map(|v| v.sqrt()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params_with_tilde(lambda_y: f64, h: f64, d: usize) -> CovParams {
        CovParams {
            lambda_y,
            sigma_data: 0.5,
            embedding: EmbeddingSpec::Constant {
                offsets: vec![h; d],
            },
        }
    }

    #[test]
    fn embed_label_examples() {
        let zero = embed_label(0.7, &EmbeddingSpec::zeros(3), 3).unwrap();
        assert_eq!(zero.0, vec![0.0; 3]);

        let affine = EmbeddingSpec::Affine {
            offsets: vec![1.0, 1.0],
            slopes: vec![2.0, 0.0],
        };
        assert_eq!(embed_label(0.5, &affine, 2).unwrap().0, vec![2.0, 1.0]);

        let w = 3.0;
        let sin = EmbeddingSpec::Sinusoidal {
            offsets: vec![1.0, 2.0],
            amplitudes: vec![0.5, -1.0],
            frequencies: vec![w, w],
        };
        let period = 2.0 * std::f64::consts::PI / w;
        let a = embed_label(0.3, &sin, 2).unwrap();
        let b = embed_label(0.3 + period, &sin, 2).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn embed_label_rejects_negative_and_bad_shape() {
        let affine = EmbeddingSpec::Affine {
            offsets: vec![0.0],
            slopes: vec![1.0],
        };
        assert!(matches!(
            embed_label(-1.0, &affine, 1),
            Err(Error::Config(_))
        ));
        assert!(embed_label(0.0, &EmbeddingSpec::zeros(2), 3).is_err());
        assert!(embed_label(0.0, &EmbeddingSpec::zeros(0), 0).is_err());
        assert!(affine.validate(1, (-1.0, 1.0)).is_err());
        assert!(affine.validate(1, (0.0, 1.0)).is_ok());
    }

    #[test]
    fn squash_examples() {
        let h = LabelEmbedding(vec![0.0, std::f64::consts::LN_2, 50.0]);
        let t = squash_embedding(&h);
        assert_eq!(t[0], 1.0);
        assert_relative_eq!(t[1], 0.5, epsilon = 1e-15);
        assert!(t[2] > 0.0 && t[2] < 1e-20);
    }

    #[test]
    fn sigma_mat_examples() {
        let iso = CovParams::isotropic(3, 0.5);
        assert_eq!(sigma_mat(2.0, 0.1, &iso).unwrap().0, vec![4.0; 3]);

        let p = params_with_tilde(1.0, 0.0, 2);
        assert_eq!(sigma_mat(1.0, 0.0, &p).unwrap().0, vec![2.0; 2]);

        let p = params_with_tilde(2.5, std::f64::consts::LN_2, 1);
        assert_relative_eq!(sigma_mat(1.0, 0.0, &p).unwrap()[0], 2.25, epsilon = 1e-15);

        assert!(matches!(sigma_mat(0.0, 0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(sigma_mat(-1.0, 0.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_dot_and_g_examples() {
        let iso = CovParams::isotropic(2, 0.5);
        assert_eq!(sigma_dot_mat(3.0, 1.0, 0.0, &iso).unwrap().0, vec![6.0; 2]);
        assert_eq!(g_coeff(2.0, 1.0, 0.0, &iso).unwrap().0, vec![2.0; 2]);

        let p = params_with_tilde(1.0, 0.0, 1);
        assert_eq!(sigma_dot_mat(1.0, 1.0, 0.0, &p).unwrap().0, vec![3.0]);
        assert_relative_eq!(
            g_coeff(0.5, 1.0, 0.0, &p).unwrap()[0],
            std::f64::consts::SQRT_2,
            epsilon = 1e-15
        );
        assert!(matches!(
            g_coeff(1.0, -1.0, 0.0, &p),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sigma_sqrt_examples() {
        assert_eq!(sigma_sqrt(&DiagCov(vec![1.0; 4])).unwrap().0, vec![1.0; 4]);
        assert_eq!(sigma_sqrt(&DiagCov(vec![4.0, 9.0])).unwrap().0, vec![2.0, 3.0]);
        assert!(sigma_sqrt(&DiagCov(vec![1.0, -1e-3])).is_err());
    }

    proptest! {
        #[test]
        fn edm_reduction_is_exact(sigma in 1e-3f64..100.0, sigma_dot in 0.0f64..5.0, y in -3.0f64..3.0) {
            let p = CovParams {
                lambda_y: 0.0,
                sigma_data: 0.5,
                embedding: EmbeddingSpec::Affine { offsets: vec![1.0, 4.0], slopes: vec![0.0, 0.0] },
            };
            let s = sigma_mat(sigma, y, &p).unwrap();
            let g = g_coeff(sigma, sigma_dot, y, &p).unwrap();
            for i in 0..2 {
                prop_assert_eq!(s[i], sigma * sigma);
                prop_assert_eq!(g[i], (2.0 * sigma_dot * sigma).sqrt());
            }
        }

        #[test]
        fn g_squared_is_sigma_dot(sigma in 1e-3f64..80.0, y in 0.0f64..1.0, lambda in 0.0f64..5.0) {
            let p = CovParams {
                lambda_y: lambda,
                sigma_data: 0.5,
                embedding: EmbeddingSpec::Affine { offsets: vec![0.0, 0.2], slopes: vec![1.0, 3.0] },
            };
            let g = g_coeff(sigma, 1.0, y, &p).unwrap();
            let sd = sigma_dot_mat(sigma, 1.0, y, &p).unwrap();
            let s = sigma_mat(sigma, y, &p).unwrap();
            let r = sigma_sqrt(&s).unwrap();
            for i in 0..2 {
                prop_assert!(((g[i] * g[i] - sd[i]) / sd[i]).abs() <= 1e-14);
                prop_assert!(((r[i] * r[i] - s[i]) / s[i]).abs() <= 1e-14);
                prop_assert!(s[i] >= sigma * sigma);
                prop_assert!(g[i] > 0.0 && sd[i] > 0.0 && r[i] > 0.0);
            }
        }

        #[test]
        fn sigma_dot_matches_central_difference(t in 0.01f64..40.0, y in 0.0f64..1.0, lambda in 0.0f64..3.0) {
            let p = CovParams {
                lambda_y: lambda,
                sigma_data: 0.5,
                embedding: EmbeddingSpec::Affine { offsets: vec![0.1, 0.5, 2.0], slopes: vec![1.0, 0.3, 0.0] },
            };
            let eps = 1e-4;
            let plus = sigma_mat(t + eps, y, &p).unwrap();
            let minus = sigma_mat(t - eps, y, &p).unwrap();
            let dot = sigma_dot_mat(t, 1.0, y, &p).unwrap();
            for i in 0..3 {
                let fd = (plus[i] - minus[i]) / (2.0 * eps);
                prop_assert!(((fd - dot[i]) / dot[i]).abs() <= 1e-6, "t={} fd={} dot={}", t, fd, dot[i]);
            }
        }

        #[test]
        fn squash_is_decreasing(a in 0.0f64..50.0, delta in 1e-6f64..10.0) {
            let t = squash_embedding(&LabelEmbedding(vec![a, a + delta]));
            prop_assert!(t[0] <= 1.0 && t[0] > 0.0);
            prop_assert!(t[1] < t[0]);
        }
    }
}
