//! Command-line entry points. Every command prints a JSON report on stdout;
//! diagnostics go to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{content_hash, DenoiserMode, RunConfig};
use crate::dataset::LabeledDataset;
use crate::denoiser::{train, ClosedFormDenoiser, Denoiser, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::eval::{label_consistency, sliding_distance, MetricsReport};
use crate::sampler::{chain_rng, sample_chains, sample_trajectory, SamplerKind};
use crate::synthdata::generate_seeded;
use crate::verify::{self, Level};

#[derive(Debug, Parser)]
#[command(name = "cedm", version, about = "Label-conditional diffusion with condition-specific noise covariance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the network denoiser on the generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw conditional samples.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated labels, or `start:end:count` for an evenly spaced
        /// inclusive range.
        #[arg(long, allow_hyphen_values = true)]
        labels: String,
        #[arg(long, default_value_t = 1)]
        per_label: usize,
        /// `ode` or `sde`; defaults to `sampler.kind` from the config.
        #[arg(long)]
        sampler: Option<String>,
        /// Also write one `step,t,x_1..x_d` trajectory file per chain.
        #[arg(long)]
        trajectories: bool,
    },
    /// Compare generated samples with real data.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in numerical checks.
    Verify {
        /// `fast` (deterministic checks) or `full` (adds Monte-Carlo checks).
        #[arg(long, default_value = "fast")]
        level: String,
    },
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunReport {
    fn new(command: &'static str, cfg: &RunConfig, start: Instant) -> Self {
        RunReport {
            command,
            config: cfg.snapshot(),
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            metrics: None,
            final_loss: None,
            loss_trace: None,
            outputs: vec![],
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("reports serialize"));
}

/// Parses `a,b,c` or `start:end:count`.
pub fn parse_labels(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::config(format!("cannot parse labels '{spec}'"));
    let labels: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        match count {
            0 => return Err(bad()),
            1 => vec![start],
            _ => (0..count)
                .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
                .collect(),
        }
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if labels.is_empty() || labels.iter().any(|y| !y.is_finite()) {
        return Err(bad());
    }
    Ok(labels)
}

fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    let ds = LabeledDataset::read_csv(&cfg.dataset_file(), Some(cfg.dataset.label_range))?;
    if ds.dim() != cfg.dataset.d {
        return Err(Error::Schema(format!(
            "dataset file has dimension {}, config says {}",
            ds.dim(),
            cfg.dataset.d
        )));
    }
    Ok(ds)
}

fn cmd_gen_data(config: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let cfg = RunConfig::load(config)?;
    let ds = generate_seeded(&cfg.dataset)?;
    let path = cfg.layout().dataset();
    ensure_parent(&path)?;
    ds.write_csv(&path)?;
    let mut report = RunReport::new("gen-data", &cfg, start);
    report.outputs.push(path);
    Ok(report)
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let io = |e: csv::Error| Error::parse(path, e);
    w.write_record(["step", "loss"]).map_err(io)?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_train(config: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let cfg = RunConfig::load(config)?;
    let ds = load_dataset(&cfg)?;
    let layout = cfg.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut td = TrainableDenoiser::new(
        ds.dim(),
        &cfg.train.hidden,
        cfg.train.activation,
        cfg.sigma_data_for(&ds),
        cfg.dataset.label_range,
        &mut rng,
    )?;
    let settings = cfg.train_settings(&ds);
    let trace_path = layout.loss_trace();
    let trace = match train(&mut td, &ds, &settings, cfg.train.steps, cfg.train.lr, &mut rng) {
        Ok(t) => t,
        Err(Error::Diverged { step, trace }) => {
            write_trace(&trace_path, &trace)?;
            eprintln!("partial loss trace written to {}", trace_path.display());
            return Err(Error::Diverged { step, trace });
        }
        Err(e) => return Err(e),
    };
    write_trace(&trace_path, &trace)?;
    let params = layout.params();
    ensure_parent(&params)?;
    td.save(&params, &cfg.train_hash())?;
    let mut report = RunReport::new("train", &cfg, start);
    report.final_loss = trace.last().copied();
    report.loss_trace = Some(trace_path);
    report.outputs.push(params);
    write_json(&layout.train_report(), &report)?;
    Ok(report)
}

fn load_denoiser(cfg: &RunConfig) -> Result<Box<dyn Denoiser>> {
    match cfg.denoiser {
        DenoiserMode::ClosedForm => Ok(Box::new(ClosedFormDenoiser::new(load_dataset(cfg)?, cfg.vicinity)?)),
        DenoiserMode::Trained => {
            let (td, _) = TrainableDenoiser::load(&cfg.layout().params())?;
            if td.shape().sizes.last() != Some(&cfg.dataset.d) {
                return Err(Error::Schema("parameter file dimension differs from config".into()));
            }
            Ok(Box::new(td))
        }
    }
}

fn write_trajectory(path: &Path, times: &[f64], states: &[Vec<f64>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let io = |e: csv::Error| Error::parse(path, e);
    let d = states.first().map_or(0, |s| s.len());
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    w.write_record(&header).map_err(io)?;
    for (step, (t, x)) in times.iter().zip(states).enumerate() {
        let mut row = vec![step.to_string(), t.to_string()];
        row.extend(x.iter().map(f64::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_sample(
    config: &Path,
    labels: &str,
    per_label: usize,
    sampler: Option<&str>,
    trajectories: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    let cfg = RunConfig::load(config)?;
    let kind = sampler.map(str::parse::<SamplerKind>).transpose()?;
    let labels = parse_labels(labels)?;
    let (lo, hi) = cfg.dataset.label_range;
    if let Some(y) = labels.iter().find(|y| !(**y >= lo && **y <= hi)) {
        return Err(Error::config(format!("label {y} lies outside [{lo}, {hi}]")));
    }
    if per_label == 0 {
        return Err(Error::config("--per-label must be >= 1"));
    }
    let scfg = cfg.sampler_with(kind);
    let cov = cfg.cov_sample();
    let den = load_denoiser(&cfg)?;
    let rows = sample_chains(den.as_ref(), &labels, per_label, &cov, &scfg, cfg.seed)?;
    let (ys, xs): (Vec<f64>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    let out = LabeledDataset::new(cfg.dataset.d, xs.concat(), ys, cfg.dataset.label_range)?;
    let layout = cfg.layout();
    let path = layout.samples(scfg.kind);
    ensure_parent(&path)?;
    out.write_csv(&path)?;
    let mut report = RunReport::new("sample", &cfg, start);
    report.outputs.push(path);
    if trajectories {
        let base = layout.trajectories(scfg.kind);
        let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectories").to_string();
        for (li, &y) in labels.iter().enumerate() {
            for ci in 0..per_label {
                let traj = sample_trajectory(den.as_ref(), y, &cov, &scfg, &mut chain_rng(cfg.seed, li, ci))?;
                let p = base.with_file_name(format!("{stem}_{li}_{ci}.csv"));
                write_trajectory(&p, &traj.times, &traj.states)?;
                report.outputs.push(p);
            }
        }
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(&layout.sample_report(scfg.kind), &report)?;
    Ok(report)
}

fn cmd_eval(real: &Path, fake: &Path, config: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let cfg = RunConfig::load(config)?;
    let range = Some(cfg.dataset.label_range);
    let real_ds = LabeledDataset::read_csv(real, range)?;
    let fake_ds = LabeledDataset::read_csv(fake, range)?;
    for (name, ds) in [("real", &real_ds), ("generated", &fake_ds)] {
        if ds.dim() != cfg.dataset.d {
            return Err(Error::Schema(format!(
                "{name} data has dimension {}, config says {}",
                ds.dim(),
                cfg.dataset.d
            )));
        }
    }
    let ecfg = cfg.eval_config();
    let sliding = sliding_distance(&real_ds, &fake_ds, &ecfg)?;
    if !sliding.starved_centers.is_empty() {
        eprintln!(
            "warning: {} starved window(s) excluded from the mean: {:?}",
            sliding.starved_centers.len(),
            sliding.starved_centers
        );
    }
    let mae = label_consistency(&fake_ds, &cfg.dataset)?;
    let metrics = MetricsReport::new(sliding, Some(mae), cfg.config_hash(), ecfg.seed);
    let path = cfg.layout().eval_report();
    write_json(&path, &metrics)?;
    let mut report = RunReport::new("eval", &cfg, start);
    report.metrics = Some(metrics);
    report.outputs.push(path);
    Ok(report)
}

fn cmd_verify(level: &str) -> Result<()> {
    let level: Level = level.parse()?;
    let results = verify::run(level);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        print_json(r);
    }
    print_json(&serde_json::json!({
        "level": format!("{level:?}").to_lowercase(),
        "total": results.len(),
        "failed": failed,
    }));
    if failed > 0 {
        return Err(Error::ChecksFailed {
            failed,
            total: results.len(),
        });
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Error::config(e.to_string().trim_end().to_string())),
    };
    let report = match cli.command {
        Command::GenData { config } => cmd_gen_data(&config)?,
        Command::Train { config } => cmd_train(&config)?,
        Command::Sample {
            config,
            labels,
            per_label,
            sampler,
            trajectories,
        } => cmd_sample(&config, &labels, per_label, sampler.as_deref(), trajectories)?,
        Command::Eval { real, fake, config } => cmd_eval(&real, &fake, &config)?,
        Command::Verify { level } => return cmd_verify(&level),
    };
    print_json(&report);
    std::io::stdout().flush().ok();
    Ok(())
}

/// Hash of a report's config snapshot, as stored in `config_hash`.
pub fn report_hash(report: &RunReport) -> String {
    content_hash(&report.config)
}
