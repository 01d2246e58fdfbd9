//! Run configuration.
//!
//! A config file is TOML written as flat `section.key = value` lines. A
//! top-level `preset = "<name>"` supplies defaults that explicit keys
//! override; a `vicinity` section in the file replaces the preset's vicinity
//! as a whole.
//!
//! Output files are named by content hashes so that independent stages find
//! each other: the dataset by the hash of `dataset`, trained parameters by
//! the hash of everything that affects training, samples and reports by the
//! hash of the whole resolved config.

use std::env;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{CovParams, EmbeddingSpec};
use crate::dataset::LabeledDataset;
use crate::denoiser::{Activation, LossConfig, TrainSettings};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::synthdata::DatasetSpec;
use crate::vicinity::{KdeConfig, VicinityConfig};

/// Environment variable that overrides the output root.
pub const OUTPUT_ENV: &str = "CEDM_OUT";
pub const DEFAULT_OUTPUT_DIR: &str = "cedm-out";
/// Length of the hash prefix in output file names.
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserMode {
    #[default]
    ClosedForm,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovSection {
    pub sigma_data: f64,
    /// Replace `sigma_data` by the mean per-dimension std of the training data.
    pub sigma_data_from_data: bool,
    pub lambda_train: f64,
    /// Falls back to `lambda_train`.
    pub lambda_sample: Option<f64>,
}

impl Default for CovSection {
    fn default() -> Self {
        CovSection {
            sigma_data: 0.5,
            sigma_data_from_data: false,
            lambda_train: 0.0,
            lambda_sample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub p_mean: f64,
    pub p_std: f64,
    pub batch_size: usize,
    pub label_drop_prob: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        LossSection {
            p_mean: l.p_mean,
            p_std: l.p_std,
            batch_size: l.batch_size,
            label_drop_prob: l.label_drop_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            lr: 1e-3,
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Explicit centers; when empty, `n_centers` evenly spaced ones are used.
    pub centers: Vec<f64>,
    pub n_centers: usize,
    /// Half-width; defaults to 1/20 of the label range.
    pub window: Option<f64>,
    pub n_projections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            centers: Vec::new(),
            n_centers: 10,
            window: None,
            n_projections: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset CSV used instead of the generated one.
    pub path: Option<PathBuf>,
}

fn default_vicinity() -> VicinityConfig {
    VicinityConfig::HardAdaptive { n_av: 50 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub denoiser: DenoiserMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub data: DataSection,
    /// Defaults to the zero embedding, `h̃ = 1` in every dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSpec>,
    #[serde(default)]
    pub cov: CovSection,
    #[serde(default = "default_vicinity")]
    pub vicinity: VicinityConfig,
    /// Defaults to the rule-of-thumb bandwidth of the training labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde: Option<KdeConfig>,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Named hyperparameter rows for the image benchmarks. Only the fields that
/// have a meaning at this scale are carried over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub n_av: usize,
    pub lambda_train: f64,
    pub lambda_sample: f64,
    pub cfg_gamma: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

pub const PRESETS: &[Preset] = &[
    Preset { name: "rc49_64", n_av: 50, lambda_train: 0.001, lambda_sample: 0.001, cfg_gamma: 1.2, steps: 100_000, lr: 1e-4, batch_size: 128 },
    Preset { name: "cell200_64", n_av: 20, lambda_train: 0.01, lambda_sample: 0.01, cfg_gamma: 1.5, steps: 50_000, lr: 5e-5, batch_size: 64 },
    Preset { name: "utkface_64", n_av: 400, lambda_train: 0.05, lambda_sample: 0.05, cfg_gamma: 1.5, steps: 100_000, lr: 1e-4, batch_size: 128 },
    Preset { name: "utkface_128", n_av: 400, lambda_train: 0.01, lambda_sample: 0.01, cfg_gamma: 1.5, steps: 200_000, lr: 1e-5, batch_size: 128 },
    Preset { name: "utkface_192", n_av: 400, lambda_train: 0.01, lambda_sample: 0.01, cfg_gamma: 1.5, steps: 800_000, lr: 1e-5, batch_size: 112 },
    Preset { name: "utkface_256", n_av: 400, lambda_train: 0.01, lambda_sample: 0.01, cfg_gamma: 1.5, steps: 800_000, lr: 1e-5, batch_size: 32 },
    Preset { name: "steering_angle_64", n_av: 10, lambda_train: 2.5, lambda_sample: 2.5, cfg_gamma: 1.5, steps: 100_000, lr: 1e-4, batch_size: 128 },
    Preset { name: "steering_angle_128", n_av: 10, lambda_train: 0.01, lambda_sample: 0.1, cfg_gamma: 1.5, steps: 400_000, lr: 5e-5, batch_size: 112 },
    Preset { name: "steering_angle_256", n_av: 20, lambda_train: 0.01, lambda_sample: 0.1, cfg_gamma: 2.0, steps: 400_000, lr: 1e-5, batch_size: 36 },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
        Error::config(format!("unknown preset '{name}'; known: {}", names.join(", ")))
    })
}

impl Preset {
    /// Every preset samples with the stochastic sampler at 32 steps.
    fn to_table(self) -> toml::Table {
        let text = format!(
            "vicinity.mode = \"hard_adaptive\"\n\
             vicinity.n_av = {}\n\
             cov.lambda_train = {:?}\n\
             cov.lambda_sample = {:?}\n\
             sampler.kind = \"sde\"\n\
             sampler.n_steps = 32\n\
             sampler.cfg_gamma = {:?}\n\
             train.steps = {}\n\
             train.lr = {:?}\n\
             loss.batch_size = {}\n",
            self.n_av,
            self.lambda_train,
            self.lambda_sample,
            self.cfg_gamma,
            self.steps,
            self.lr,
            self.batch_size
        );
        text.parse().expect("preset tables are valid TOML")
    }
}

/// Overlays `user` on `base` one section deep; `vicinity` is replaced whole.
fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if key != "vicinity" => {
                for (k, v) in u {
                    b.insert(k, v);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON form of `value` with object keys sorted.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config values serialize");
    sha256_hex(&serde_json::to_vec(&canonical).expect("config values serialize"))
}

#[derive(Serialize)]
struct TrainKey<'a> {
    seed: u64,
    dataset: &'a DatasetSpec,
    data: &'a DataSection,
    embedding: &'a Option<EmbeddingSpec>,
    sigma_data: f64,
    sigma_data_from_data: bool,
    lambda_train: f64,
    vicinity: &'a VicinityConfig,
    kde: &'a Option<KdeConfig>,
    loss: &'a LossSection,
    train: &'a TrainSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config(format!("config is not valid TOML: {}", e.message()))
        })?;
        let table = match user.get("preset") {
            Some(toml::Value::String(name)) => merge(preset(name)?.to_table(), user),
            Some(_) => return Err(Error::config("preset must be a string")),
            None => user,
        };
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let (d, range) = (self.dataset.d, self.dataset.label_range);
        if let Some(e) = &self.embedding {
            e.validate(d, range)?;
        }
        self.cov_train().validate()?;
        self.cov_sample().validate()?;
        self.vicinity.validate()?;
        if let Some(k) = &self.kde {
            k.validate()?;
        }
        self.loss_config().validate()?;
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return Err(Error::config("train.lr must be > 0"));
        }
        if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
            return Err(Error::config("train.hidden must list positive layer widths"));
        }
        self.sampler.validate()?;
        if self.eval.centers.is_empty() && self.eval.n_centers == 0 {
            return Err(Error::config("eval: need centers or n_centers >= 1"));
        }
        self.eval_config().validate(range)?;
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn embedding(&self) -> EmbeddingSpec {
        self.embedding
            .clone()
            .unwrap_or_else(|| EmbeddingSpec::zeros(self.dataset.d))
    }

    fn cov_with(&self, lambda_y: f64) -> CovParams {
        CovParams {
            lambda_y,
            sigma_data: self.cov.sigma_data,
            embedding: self.embedding(),
        }
    }

    pub fn cov_train(&self) -> CovParams {
        self.cov_with(self.cov.lambda_train)
    }

    pub fn cov_sample(&self) -> CovParams {
        self.cov_with(self.cov.lambda_sample.unwrap_or(self.cov.lambda_train))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            p_mean: self.loss.p_mean,
            p_std: self.loss.p_std,
            sigma_data: self.cov.sigma_data,
            batch_size: self.loss.batch_size,
            label_drop_prob: self.loss.label_drop_prob,
        }
    }

    pub fn kde_for(&self, dataset: &LabeledDataset) -> KdeConfig {
        self.kde
            .unwrap_or_else(|| KdeConfig::rule_of_thumb(dataset.labels()))
    }

    /// `cov.sigma_data`, or the data's mean per-dimension std when
    /// `cov.sigma_data_from_data` is set.
    pub fn sigma_data_for(&self, dataset: &LabeledDataset) -> f64 {
        if self.cov.sigma_data_from_data {
            dataset.mean_std()
        } else {
            self.cov.sigma_data
        }
    }

    pub fn train_settings(&self, dataset: &LabeledDataset) -> TrainSettings {
        let sigma_data = self.sigma_data_for(dataset);
        TrainSettings {
            vicinity: self.vicinity,
            kde: self.kde_for(dataset),
            cov: CovParams {
                sigma_data,
                ..self.cov_train()
            },
            loss: LossConfig {
                sigma_data,
                ..self.loss_config()
            },
        }
    }

    pub fn sampler_with(&self, kind: Option<SamplerKind>) -> SamplerConfig {
        SamplerConfig {
            kind: kind.unwrap_or(self.sampler.kind),
            ..self.sampler
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let range = self.dataset.label_range;
        let window = self.eval.window.unwrap_or((range.1 - range.0) / 20.0);
        let mut cfg = if self.eval.centers.is_empty() {
            EvalConfig::evenly_spaced(range, self.eval.n_centers, window)
        } else {
            EvalConfig {
                centers: self.eval.centers.clone(),
                window,
                ..EvalConfig::default()
            }
        };
        cfg.n_projections = self.eval.n_projections;
        cfg.seed = self.seed;
        cfg
    }

    /// Resolved config without the output location, which never affects
    /// results.
    pub fn snapshot(&self) -> RunConfig {
        RunConfig {
            output_dir: None,
            ..self.clone()
        }
    }

    pub fn config_hash(&self) -> String {
        content_hash(&self.snapshot())
    }

    pub fn data_hash(&self) -> String {
        content_hash(&self.dataset)
    }

    pub fn train_hash(&self) -> String {
        content_hash(&TrainKey {
            seed: self.seed,
            dataset: &self.dataset,
            data: &self.data,
            embedding: &self.embedding,
            sigma_data: self.cov.sigma_data,
            sigma_data_from_data: self.cov.sigma_data_from_data,
            lambda_train: self.cov.lambda_train,
            vicinity: &self.vicinity,
            kde: &self.kde,
            loss: &self.loss,
            train: &self.train,
        })
    }

    /// `$CEDM_OUT`, else `output_dir`, else `cedm-out`.
    pub fn output_root(&self) -> PathBuf {
        match env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
        }
    }

    pub fn layout(&self) -> OutputLayout {
        OutputLayout {
            root: self.output_root(),
            config: prefix(&self.config_hash()),
            data: prefix(&self.data_hash()),
            train: prefix(&self.train_hash()),
        }
    }

    /// The dataset file used for training and closed-form denoising.
    pub fn dataset_file(&self) -> PathBuf {
        match &self.data.path {
            Some(p) => p.clone(),
            None => self.layout().dataset(),
        }
    }
}

fn prefix(hash: &str) -> String {
    hash[..PREFIX_LEN].to_string()
}

/// File locations under the output root: `data/`, `params/`, `samples/`,
/// `reports/`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayout {
    pub root: PathBuf,
    config: String,
    data: String,
    train: String,
}

impl OutputLayout {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data").join(format!("{}_dataset.csv", self.data))
    }

    pub fn params(&self) -> PathBuf {
        self.root.join("params").join(format!("{}_params.json", self.train))
    }

    pub fn loss_trace(&self) -> PathBuf {
        self.root.join("reports").join(format!("{}_loss.csv", self.train))
    }

    pub fn train_report(&self) -> PathBuf {
        self.root.join("reports").join(format!("{}_train.json", self.train))
    }

    pub fn samples(&self, kind: SamplerKind) -> PathBuf {
        self.root
            .join("samples")
            .join(format!("{}_{}_samples.csv", self.config, kind.as_str()))
    }

    pub fn trajectories(&self, kind: SamplerKind) -> PathBuf {
        self.root
            .join("samples")
            .join(format!("{}_{}_trajectories.csv", self.config, kind.as_str()))
    }

    pub fn sample_report(&self, kind: SamplerKind) -> PathBuf {
        self.root
            .join("reports")
            .join(format!("{}_{}_sample.json", self.config, kind.as_str()))
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("reports").join(format!("{}_eval.json", self.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::DatasetKind;

    const BASE: &str = r#"
seed = 7
dataset.kind = "gaussian_shift"
dataset.noise_std = 0.1
dataset.n_samples = 100
dataset.d = 2
dataset.label_range = [0.0, 1.0]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.denoiser, DenoiserMode::ClosedForm);
        assert!(matches!(cfg.dataset.kind, DatasetKind::GaussianShift { .. }));
        assert_eq!(cfg.sampler, SamplerConfig::default());
        assert_eq!(cfg.vicinity, VicinityConfig::HardAdaptive { n_av: 50 });
        assert_eq!(cfg.cov_sample().lambda_y, 0.0);
        let e = cfg.eval_config();
        assert_eq!(e.centers.len(), 10);
        assert!((e.window - 0.05).abs() < 1e-15);
    }

    #[test]
    fn empirical_sigma_data() {
        let ds = LabeledDataset::from_rows(2, vec![0.0, 1.0, 2.0, 1.0], vec![0.2, 0.8]).unwrap();
        let fixed = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(fixed.train_settings(&ds).loss.sigma_data, 0.5);
        assert_eq!(fixed.train.hidden, vec![64, 64, 64]);
        let auto = RunConfig::from_toml_str(&format!("{BASE}\ncov.sigma_data_from_data = true\n")).unwrap();
        let s = auto.train_settings(&ds);
        assert_eq!(s.loss.sigma_data, 0.5);
        assert_eq!(s.cov.sigma_data, 0.5);
        let wide = LabeledDataset::from_rows(2, vec![0.0, 0.0, 4.0, 0.0], vec![0.2, 0.8]).unwrap();
        assert_eq!(auto.sigma_data_for(&wide), 1.0);
        assert_ne!(auto.train_hash(), fixed.train_hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for extra in [
            "sampler.n_stepz = 3",
            "dataset.colour = 1",
            "bogus = 1",
            "sampler.kind = \"euler\"",
            "vicinity.mode = \"soft\"",
        ] {
            let r = RunConfig::from_toml_str(&format!("{BASE}\n{extra}\n"));
            assert!(matches!(r, Err(Error::Config(_))), "{extra}: {r:?}");
        }
        let zero = BASE.replace("n_samples = 100", "n_samples = 0");
        assert!(matches!(RunConfig::from_toml_str(&zero), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("seed = ").is_err());
    }

    #[test]
    fn every_preset_loads_with_its_values() {
        for p in PRESETS {
            let cfg = RunConfig::from_toml_str(&format!("preset = \"{}\"\n{BASE}", p.name)).unwrap();
            assert_eq!(cfg.vicinity, VicinityConfig::HardAdaptive { n_av: p.n_av });
            assert_eq!(cfg.cov_train().lambda_y, p.lambda_train);
            assert_eq!(cfg.cov_sample().lambda_y, p.lambda_sample);
            assert_eq!(cfg.sampler.cfg_gamma, p.cfg_gamma);
            assert_eq!(cfg.sampler.kind, SamplerKind::Sde);
            assert_eq!(cfg.sampler.n_steps, 32);
            assert_eq!(cfg.train.steps, p.steps);
            assert_eq!(cfg.train.lr, p.lr);
            assert_eq!(cfg.loss.batch_size, p.batch_size);
        }
        let sa = preset("steering_angle_128").unwrap();
        assert_eq!((sa.lambda_train, sa.lambda_sample, sa.n_av, sa.cfg_gamma), (0.01, 0.1, 10, 1.5));
        assert!(preset("imagenet").is_err());
    }

    #[test]
    fn explicit_keys_override_preset() {
        let text = format!(
            "preset = \"rc49_64\"\n{BASE}\nsampler.cfg_gamma = 1.0\nvicinity.mode = \"hard_fixed\"\nvicinity.kappa = 0.01\n"
        );
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.sampler.cfg_gamma, 1.0);
        assert_eq!(cfg.sampler.n_steps, 32);
        assert_eq!(cfg.vicinity, VicinityConfig::HardFixed { kappa: 0.01 });
        assert_eq!(cfg.cov_train().lambda_y, 0.001);
    }

    #[test]
    fn hashes_track_the_right_sections() {
        let a = RunConfig::from_toml_str(BASE).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        b.sampler.n_steps = 10;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.train_hash(), b.train_hash());
        assert_eq!(a.data_hash(), b.data_hash());
        b.train.steps = 5;
        assert_ne!(a.train_hash(), b.train_hash());
        assert_eq!(a.data_hash(), b.data_hash());
        assert_eq!(a.config_hash().len(), 64);
        // stable across calls
        assert_eq!(a.config_hash(), RunConfig::from_toml_str(BASE).unwrap().config_hash());
    }

    #[test]
    fn missing_data_path_is_an_io_error() {
        let text = format!("{BASE}\ndata.path = \"/definitely/not/here.csv\"\n");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Io { .. })));
    }
}
