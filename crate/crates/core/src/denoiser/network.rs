use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::DiagCov;
use crate::error::{Error, Result};

use super::precond::{precond_coeffs, PrecondCoeffs};
use super::Denoiser;

/// Sinusoidal label features fed to the network (or the learned null token
/// when the label is dropped).
pub const LABEL_FEATURES: usize = 8;
/// Summary of the per-dimension `c_noise` vector: its mean and first real
/// Fourier pair over the dimension index.
pub const NOISE_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Layer sizes of a fully connected network, input first. Hidden layers use
/// `activation`; the output layer is linear.
///
/// Parameters live in one flat slice, layer by layer: the row-major weight
/// matrix (`out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

impl MlpShape {
    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn forward(&self, theta: &[f64], input: &[f64], cache: &mut ForwardCache) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.sizes[0]);
        cache.acts.clear();
        cache.pres.clear();
        cache.acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &theta[offset..offset + n_in * n_out];
            let b = &theta[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let a = &cache.acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            let out = if l + 1 < self.n_layers() {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            cache.pres.push(z);
            cache.acts.push(out);
        }
        cache.acts.last().cloned().unwrap_or_default()
    }

    /// Back-propagates `grad_out = ∂L/∂output` through the cached forward
    /// pass, accumulating into `grad_theta`. Returns `∂L/∂input`.
    pub fn backward(
        &self,
        theta: &[f64],
        cache: &ForwardCache,
        grad_out: &[f64],
        grad_theta: &mut [f64],
    ) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut g = grad_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < self.n_layers() {
                for (gi, z) in g.iter_mut().zip(&cache.pres[l]) {
                    *gi *= self.activation.derivative(*z);
                }
            }
            let off = offsets[l];
            let a = &cache.acts[l];
            let (gw, rest) = grad_theta[off..].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (r, ai) in row.iter_mut().zip(a) {
                    *r += g[o] * ai;
                }
                rest[o] += g[o];
            }
            let w = &theta[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += g[o] * wi;
                }
            }
            g = prev;
        }
        g
    }
}

/// Label features: `sin(π·2^k·u)`, `cos(π·2^k·u)` for `k = 0..4`, where `u`
/// maps the label range onto `[0, 1]`.
pub fn label_features(y: f64, label_range: (f64, f64)) -> [f64; LABEL_FEATURES] {
    let (lo, hi) = label_range;
    let u = if hi > lo { (y - lo) / (hi - lo) } else { 0.0 };
    let mut f = [0.0; LABEL_FEATURES];
    for k in 0..LABEL_FEATURES / 2 {
        let arg = std::f64::consts::PI * (1 << k) as f64 * u;
        f[2 * k] = arg.sin();
        f[2 * k + 1] = arg.cos();
    }
    f
}

/// Mean of `c_noise` and its first real Fourier pair over the dimension
/// index.
pub fn noise_features(c_noise: &[f64]) -> [f64; NOISE_FEATURES] {
    let d = c_noise.len() as f64;
    let mean = c_noise.iter().sum::<f64>() / d;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, c) in c_noise.iter().enumerate() {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / d;
        re += c * phase.cos();
        im += c * phase.sin();
    }
    [mean, 2.0 * re / d, 2.0 * im / d]
}

/// `D_θ(x̃, y, Σ) = c_skip∘x̃ + c_out∘F_θ(c_in∘x̃, label features, noise features)`.
///
/// `theta` holds the network parameters followed by the learned null-label
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableDenoiser {
    shape: MlpShape,
    theta: Vec<f64>,
    sigma_data: f64,
    label_range: (f64, f64),
}

pub(crate) struct Evaluation {
    pub output: Vec<f64>,
    pub coeffs: PrecondCoeffs,
    pub cache: ForwardCache,
}

impl TrainableDenoiser {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        sigma_data: f64,
        label_range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("network dimensions must be >= 1"));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::config("sigma_data must be > 0"));
        }
        let mut sizes = vec![dim + LABEL_FEATURES + NOISE_FEATURES];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let shape = MlpShape { sizes, activation };
        let mut theta = Vec::with_capacity(shape.n_params() + LABEL_FEATURES);
        for w in shape.sizes.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                let z: f64 = StandardNormal.sample(rng);
                theta.push(scale * z);
            }
            theta.extend(std::iter::repeat_n(0.0, w[1]));
        }
        theta.extend([0.0; LABEL_FEATURES]);
        Ok(TrainableDenoiser {
            shape,
            theta,
            sigma_data,
            label_range,
        })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn label_range(&self) -> (f64, f64) {
        self.label_range
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn null_token(&self) -> &[f64] {
        &self.theta[self.shape.n_params()..]
    }

    /// Zeroes the output layer so that `F_θ ≡ 0`.
    pub fn zero_output_layer(&mut self) {
        let n = self.shape.n_params();
        let s = &self.shape.sizes;
        let last = s[s.len() - 2] * s[s.len() - 1] + s[s.len() - 1];
        self.theta[n - last..n].iter_mut().for_each(|v| *v = 0.0);
    }

    fn network_input(&self, x: &[f64], label: Option<f64>, coeffs: &PrecondCoeffs) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.shape.sizes[0]);
        input.extend(x.iter().zip(&coeffs.c_in).map(|(xi, c)| xi * c));
        match label {
            Some(y) => input.extend(label_features(y, self.label_range)),
            None => input.extend_from_slice(self.null_token()),
        }
        input.extend(noise_features(&coeffs.c_noise));
        input
    }

    pub(crate) fn evaluate(
        &self,
        x: &[f64],
        label: Option<f64>,
        sigma: &DiagCov,
    ) -> Result<Evaluation> {
        let d = self.dim();
        if x.len() != d || sigma.len() != d {
            return Err(Error::domain(format!(
                "network expects dimension {d}, got x of {} and Σ of {}",
                x.len(),
                sigma.len()
            )));
        }
        let coeffs = precond_coeffs(sigma, self.sigma_data)?;
        let input = self.network_input(x, label, &coeffs);
        let mut cache = ForwardCache::default();
        let f = self
            .shape
            .forward(&self.theta[..self.shape.n_params()], &input, &mut cache);
        let output: Vec<f64> = (0..d)
            .map(|k| coeffs.c_skip[k] * x[k] + coeffs.c_out[k] * f[k])
            .collect();
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                what: "network output".into(),
            });
        }
        Ok(Evaluation {
            output,
            coeffs,
            cache,
        })
    }

    /// Accumulates `∂L/∂θ` given `∂L/∂D` for one evaluation.
    pub(crate) fn accumulate_grad(
        &self,
        eval: &Evaluation,
        label: Option<f64>,
        grad_d: &[f64],
        grad_theta: &mut [f64],
    ) {
        let n = self.shape.n_params();
        let grad_f: Vec<f64> = grad_d
            .iter()
            .zip(&eval.coeffs.c_out)
            .map(|(g, c)| g * c)
            .collect();
        let grad_in = self
            .shape
            .backward(&self.theta[..n], &eval.cache, &grad_f, &mut grad_theta[..n]);
        if label.is_none() {
            let d = self.dim();
            for (g, gi) in grad_theta[n..]
                .iter_mut()
                .zip(&grad_in[d..d + LABEL_FEATURES])
            {
                *g += gi;
            }
        }
    }

    pub fn precond_denoise(
        &self,
        x: &[f64],
        label: Option<f64>,
        sigma: &DiagCov,
    ) -> Result<Vec<f64>> {
        Ok(self.evaluate(x, label, sigma)?.output)
    }

    pub fn to_file(&self, config_hash: &str) -> ParamsFile {
        ParamsFile {
            header: ParamsHeader {
                format: PARAMS_FORMAT.to_string(),
                dim: self.dim(),
                layer_sizes: self.shape.sizes.clone(),
                activation: self.shape.activation,
                label_features: LABEL_FEATURES,
                noise_features: NOISE_FEATURES,
                sigma_data: self.sigma_data,
                label_range: self.label_range,
                config_hash: config_hash.to_string(),
                n_params: self.theta.len(),
            },
            params: self.theta.clone(),
        }
    }

    pub fn from_file(file: ParamsFile) -> Result<Self> {
        let h = &file.header;
        if h.format != PARAMS_FORMAT {
            return Err(Error::Schema(format!("unknown params format `{}`", h.format)));
        }
        if h.label_features != LABEL_FEATURES || h.noise_features != NOISE_FEATURES {
            return Err(Error::Schema("feature layout mismatch".into()));
        }
        let shape = MlpShape {
            sizes: h.layer_sizes.clone(),
            activation: h.activation,
        };
        let expected = shape.n_params() + LABEL_FEATURES;
        if shape.sizes.len() < 2
            || shape.sizes[0] != h.dim + LABEL_FEATURES + NOISE_FEATURES
            || *shape.sizes.last().unwrap() != h.dim
            || file.params.len() != expected
            || h.n_params != expected
        {
            return Err(Error::Schema(format!(
                "params header does not match {} stored parameters",
                file.params.len()
            )));
        }
        if file.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite parameter".into()));
        }
        Ok(TrainableDenoiser {
            shape,
            theta: file.params,
            sigma_data: h.sigma_data,
            label_range: h.label_range,
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let text = serde_json::to_string(&self.to_file(config_hash))
            .map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ParamsFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let hash = file.header.config_hash.clone();
        Ok((Self::from_file(file)?, hash))
    }
}

impl Denoiser for TrainableDenoiser {
    fn dim(&self) -> usize {
        *self.shape.sizes.last().unwrap()
    }

    fn denoise(&self, x_noisy: &[f64], label: Option<f64>, sigma: &DiagCov) -> Result<Vec<f64>> {
        self.precond_denoise(x_noisy, label, sigma)
    }
}

const PARAMS_FORMAT: &str = "cedm-params-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub format: String,
    pub dim: usize,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub label_features: usize,
    pub noise_features: usize,
    pub sigma_data: f64,
    pub label_range: (f64, f64),
    pub config_hash: String,
    pub n_params: usize,
}

/// On-disk form of a trained denoiser: a header plus the flat parameter
/// vector (network weights, then the null token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub header: ParamsHeader,
    pub params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(width: usize) -> TrainableDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        TrainableDenoiser::new(2, &[width, width], Activation::Silu, 0.5, (0.0, 1.0), &mut rng)
            .unwrap()
    }

    #[test]
    fn zero_network_passes_skip_through() {
        let mut td = net(8);
        td.zero_output_layer();
        let x = [0.7, -1.3];
        let out = td.precond_denoise(&x, Some(0.4), &DiagCov(vec![0.25; 2])).unwrap();
        assert_eq!(out, vec![0.35, -0.65]);

        let sigma = DiagCov(vec![1.7, 0.02]);
        let c = precond_coeffs(&sigma, 0.5).unwrap();
        let out = td.precond_denoise(&x, None, &sigma).unwrap();
        assert_eq!(out, vec![c.c_skip[0] * x[0], c.c_skip[1] * x[1]]);

        let out = td.precond_denoise(&x, Some(0.1), &DiagCov(vec![1e-14; 2])).unwrap();
        assert!((out[0] - x[0]).abs() < 1e-12 && (out[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn output_jacobian_matches_finite_differences() {
        let mut td = net(8);
        let x = [0.3, 0.9];
        let sigma = DiagCov(vec![0.4, 1.1]);
        let eval = td.evaluate(&x, Some(0.6), &sigma).unwrap();
        // gradient of the first output coordinate
        let mut grad = vec![0.0; td.n_params()];
        td.accumulate_grad(&eval, Some(0.6), &[1.0, 0.0], &mut grad);
        let h = 1e-6;
        for p in [0, 5, 40, td.shape.n_params() - 1] {
            let orig = td.theta[p];
            td.theta[p] = orig + h;
            let up = td.precond_denoise(&x, Some(0.6), &sigma).unwrap()[0];
            td.theta[p] = orig - h;
            let dn = td.precond_denoise(&x, Some(0.6), &sigma).unwrap()[0];
            td.theta[p] = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grad[p]).abs() / fd.abs().max(grad[p].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {p}: fd {fd} vs {}", grad[p]);
        }
    }

    #[test]
    fn feature_helpers() {
        let f = label_features(0.0, (0.0, 2.0));
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        let n = noise_features(&[0.5, 0.5, 0.5, 0.5]);
        assert!((n[0] - 0.5).abs() < 1e-15 && n[1].abs() < 1e-15 && n[2].abs() < 1e-15);
    }

    #[test]
    fn params_file_round_trip_and_validation() {
        let td = net(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        td.save(&path, "abc").unwrap();
        let (back, hash) = TrainableDenoiser::load(&path).unwrap();
        assert_eq!(back, td);
        assert_eq!(hash, "abc");

        let mut file = td.to_file("abc");
        file.params.pop();
        assert!(matches!(
            TrainableDenoiser::from_file(file),
            Err(Error::Schema(_))
        ));
    }
}
