//! `ehrpd` command-line entry point.
//!
//! Every command starts from [`RunConfig::default`], applies the file given
//! with `--config`, then `EHRPD_SEED`, then explicit flags. The effective
//! configuration is written next to every output.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{seed_from_env, ConfigError, RunConfig};
use crate::data::{
    generate_synthetic_cohort, load_cohort, split_cohort, write_cohort, Cohort, DataError,
};
use crate::metrics::{evaluate, MetricReport, MetricsError};
use crate::model::{Ablations, ModelError};
use crate::real::Real;
use crate::trainer::{
    self, generate_cohort, grad_check, log_to_csv, GenerationMode, GradCheckReport, Precision,
    TrainError, TrainState,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 1 for usage and configuration errors, 2 for unreadable or
    /// inconsistent data, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Train(TrainError::NonFinite { .. }) | Self::Numerical(_) => 3,
            Self::Train(TrainError::Config(_)) => 1,
            Self::Model(
                ModelError::InvalidConfig(_) | ModelError::OddWidth(_) | ModelError::Schedule(_),
            ) => 1,
            Self::Metrics(MetricsError::Fraction(_)) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn dflt(text: &str, value: impl Display) -> String {
    format!("{text} [default: {value}]")
}

fn defaults_help() -> String {
    format!(
        "Every field of the run configuration, with its default:\n\n{}",
        RunConfig::default().to_json()
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "ehrpd",
    version,
    about = "Synthesise longitudinal multimodal EHR sequences with a predictive diffusion model",
    after_long_help = defaults_help()
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration. Unknown keys are rejected; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, help = dflt("Worker threads; results do not depend on it", 1))]
    pub threads: Option<usize>,
    /// Seed of the command. Overrides EHRPD_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the oracle cohort (and optionally its train/val/test split).
    #[command(after_long_help = defaults_help())]
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    #[command(after_long_help = defaults_help())]
    Train(TrainArgs),
    /// Roll seed patients forward with a trained model.
    #[command(after_long_help = defaults_help())]
    Generate(GenerateArgs),
    /// Compute fidelity, privacy and time metrics as a JSON report.
    #[command(after_long_help = defaults_help())]
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    #[command(after_long_help = defaults_help())]
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Cohort file to write; the header goes next to it.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, help = dflt("Number of patients", RunConfig::default().synthetic.num_patients))]
    pub num_patients: Option<usize>,
    #[arg(long, help = dflt("Maximum visits per patient", RunConfig::default().synthetic.max_visits))]
    pub max_visits: Option<usize>,
    /// Also write `<stem>.train.jsonl`, `<stem>.val.jsonl` and `<stem>.test.jsonl`.
    #[arg(long)]
    pub split: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training cohort.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, help = dflt("Training epochs", RunConfig::default().train.epochs))]
    pub epochs: Option<usize>,
    #[arg(long, help = dflt("Patients per optimizer step", RunConfig::default().train.batch_size))]
    pub batch_size: Option<usize>,
    #[arg(long, help = dflt("Ablation to apply", "none"))]
    pub ablation: Option<AblationArg>,
    #[arg(long, help = dflt("Floating-point width, 32 or 64", 32))]
    pub precision: Option<u8>,
    /// CSV log of per-epoch losses [default: <checkpoint>/metrics.csv].
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    None,
    As1,
    As2,
    As3,
    As4,
}

impl AblationArg {
    fn ablations(self) -> Ablations {
        let name = self.to_possible_value().expect("no skipped variants");
        Ablations::named(name.get_name()).expect("every variant is a known ablation")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Oneshot,
    Ancestral,
}

impl From<ModeArg> for GenerationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Oneshot => GenerationMode::OneShot,
            ModeArg::Ancestral => GenerationMode::Ancestral,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory of the trained model.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Cohort whose first visits seed generation.
    #[arg(long, value_name = "FILE")]
    pub seeds: Option<PathBuf>,
    #[arg(long, help = dflt("Visits generated per patient; 0 copies the seeds", RunConfig::default().generation.horizon))]
    pub horizon: Option<usize>,
    #[arg(long, help = dflt("Sampling mode", "oneshot"))]
    pub mode: Option<ModeArg>,
    /// Synthetic cohort file to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Lpl,
    Mpl,
    TimeRmse,
    Pd,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory of the model to score.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Held-out real cohort.
    #[arg(long, value_name = "FILE")]
    pub real: Option<PathBuf>,
    /// Synthetic cohort; required for presence disclosure.
    #[arg(long, value_name = "FILE")]
    pub synthetic: Option<PathBuf>,
    #[arg(long, num_args = 1.., help = dflt("Known fractions for presence disclosure", 0.1))]
    pub pd_fraction: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', help = dflt("Metrics to compute", "lpl,mpl,time-rmse,pd"))]
    pub metrics: Option<Vec<MetricArg>>,
    /// Report file [default: stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, help = dflt("Largest accepted relative error", 1e-4))]
    pub tolerance: Option<f64>,
    /// Only check parameters whose name starts with this prefix.
    #[arg(long)]
    pub only: Option<String>,
    /// Report file [default: stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Parses the process arguments, runs the command and maps the outcome to
/// an exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Resolves the configuration for `cli` without running anything.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed.or(seed_from_env()?) {
        match &cli.command {
            Command::SynthData(_) => cfg.synthetic.seed = seed,
            Command::Train(_) => cfg.train.seed = seed,
            Command::Generate(_) => cfg.generation.seed = seed,
            Command::Evaluate(_) => cfg.evaluation.seed = seed,
            Command::GradCheck(_) => cfg.grad_check.seed = seed,
        }
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    let p = &mut cfg.paths;
    match &cli.command {
        Command::SynthData(a) => {
            set(&mut p.data, &a.out);
            set_value(&mut cfg.synthetic.num_patients, a.num_patients);
            set_value(&mut cfg.synthetic.max_visits, a.max_visits);
            cfg.split.enabled |= a.split;
        }
        Command::Train(a) => {
            set(&mut p.data, &a.data);
            set(&mut p.checkpoint, &a.checkpoint);
            set(&mut p.metrics_log, &a.log);
            set_value(&mut cfg.train.epochs, a.epochs);
            set_value(&mut cfg.train.batch_size, a.batch_size);
            if let Some(a) = a.ablation {
                cfg.train.model.ablations = a.ablations();
            }
            if let Some(bits) = a.precision {
                cfg.train.precision = Precision::try_from(bits).map_err(CliError::Usage)?;
            }
        }
        Command::Generate(a) => {
            set(&mut p.checkpoint, &a.checkpoint);
            set(&mut p.seeds, &a.seeds);
            set(&mut p.synthetic, &a.out);
            set_value(&mut cfg.generation.horizon, a.horizon);
            if let Some(m) = a.mode {
                cfg.generation.mode = m.into();
            }
        }
        Command::Evaluate(a) => {
            set(&mut p.checkpoint, &a.checkpoint);
            set(&mut p.real, &a.real);
            set(&mut p.synthetic, &a.synthetic);
            set(&mut p.report, &a.out);
            if let Some(f) = &a.pd_fraction {
                cfg.evaluation.pd_fractions = f.clone();
            }
            if let Some(m) = &a.metrics {
                let e = &mut cfg.evaluation;
                e.lpl = m.contains(&MetricArg::Lpl);
                e.mpl = m.contains(&MetricArg::Mpl);
                e.time_rmse = m.contains(&MetricArg::TimeRmse);
                if !m.contains(&MetricArg::Pd) {
                    e.pd_fractions.clear();
                }
            }
        }
        Command::GradCheck(a) => set(&mut p.report, &a.out),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn set_value<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| {
        CliError::Usage(format!(
            "missing {flag} (or the matching paths entry in the config)"
        ))
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", cfg.threads)))?;
    pool.install(|| match &cli.command {
        Command::SynthData(_) => cmd_synth_data(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::GradCheck(a) => cmd_grad_check(&cfg, a),
    })
}

/// Path of the configuration echo for an output file or directory.
pub fn echo_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run.json")
    } else {
        output.with_extension("run.json")
    }
}

fn write_echo(cfg: &RunConfig, output: &Path) -> Result<(), CliError> {
    let path = echo_path(output);
    fs::write(&path, cfg.to_json()).map_err(io_err(&path))
}

fn summary(label: &str, c: &Cohort) {
    let codes: Vec<usize> = (0..c.num_modalities())
        .map(|m| {
            c.patients
                .iter()
                .flat_map(|p| &p.visits)
                .map(|v| v.codes[m].len())
                .sum()
        })
        .collect();
    println!(
        "{label}: {} patients, {} visits, {} transitions, codes per modality {codes:?}",
        c.patients.len(),
        c.num_visits(),
        c.num_transitions()
    );
}

pub fn cmd_synth_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = required(&cfg.paths.data, "--out")?;
    let cohort = generate_synthetic_cohort(&cfg.synthetic)?;
    write_cohort(&cohort, out)?;
    write_echo(cfg, out)?;
    summary(&out.display().to_string(), &cohort);
    if cfg.split.enabled {
        let (train, val, test) = split_cohort(&cohort, cfg.split.ratios, cfg.split.seed)?;
        for (part, c) in [("train", &train), ("val", &val), ("test", &test)] {
            let path = out.with_extension(format!("{part}.jsonl"));
            write_cohort(c, &path)?;
            summary(&path.display().to_string(), c);
        }
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = required(&cfg.paths.data, "--data")?;
    let dir = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let cohort = load_cohort(data)?;
    summary(&data.display().to_string(), &cohort);
    let log = match cfg.train.precision {
        Precision::F32 => train_and_save::<f32>(cfg, &cohort, dir)?,
        Precision::F64 => train_and_save::<f64>(cfg, &cohort, dir)?,
    };
    let log_path = cfg
        .paths
        .metrics_log
        .clone()
        .unwrap_or_else(|| dir.join("metrics.csv"));
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    write_echo(cfg, dir)?;
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn train_and_save<T: Real>(
    cfg: &RunConfig,
    cohort: &Cohort,
    dir: &Path,
) -> Result<String, CliError> {
    let (state, log) = trainer::train::<T>(cohort, &cfg.train, |e| {
        log::info!(
            "epoch {}: L_d {:.6} L_e {:.6} L_t {:.6} total {:.6}",
            e.epoch,
            e.diffusion,
            e.codes,
            e.time,
            e.total
        );
    })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    checkpoint::save(&state, dir)?;
    Ok(log_to_csv(&log))
}

fn load_state<T: Real>(dir: &Path) -> Result<TrainState<T>, CliError> {
    Ok(checkpoint::load::<T>(dir)?)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let seeds_path = required(&cfg.paths.seeds, "--seeds")?;
    let out = required(&cfg.paths.synthetic, "--out")?;
    let seeds = load_cohort(seeds_path)?;
    let g = &cfg.generation;
    let synthetic = match checkpoint::read_manifest(dir)?.config.precision {
        Precision::F32 => generate_cohort(
            &load_state::<f32>(dir)?.model,
            &seeds,
            g.horizon,
            g.mode,
            g.seed,
        )?,
        Precision::F64 => generate_cohort(
            &load_state::<f64>(dir)?.model,
            &seeds,
            g.horizon,
            g.mode,
            g.seed,
        )?,
    };
    write_cohort(&synthetic, out)?;
    write_echo(cfg, out)?;
    summary(&out.display().to_string(), &synthetic);
    Ok(())
}

#[derive(Debug, Serialize)]
struct Report<'a, R> {
    config: &'a RunConfig,
    #[serde(flatten)]
    result: R,
}

fn emit<R: Serialize>(cfg: &RunConfig, result: R) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&Report {
        config: cfg,
        result,
    })
    .expect("report serialises")
        + "\n";
    match &cfg.paths.report {
        Some(path) => fs::write(path, text).map_err(io_err(path)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct Metrics {
    metrics: MetricReport,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let real = load_cohort(required(&cfg.paths.real, "--real")?)?;
    let synthetic = cfg
        .paths
        .synthetic
        .as_deref()
        .map(load_cohort)
        .transpose()?;
    if synthetic.is_none() && !cfg.evaluation.pd_fractions.is_empty() {
        log::warn!("no synthetic cohort given; presence disclosure is reported as null");
    }
    let opts = &cfg.evaluation;
    let report = match checkpoint::read_manifest(dir)?.config.precision {
        Precision::F32 => evaluate(
            &load_state::<f32>(dir)?.model,
            &real,
            synthetic.as_ref(),
            opts,
        )?,
        Precision::F64 => evaluate(
            &load_state::<f64>(dir)?.model,
            &real,
            synthetic.as_ref(),
            opts,
        )?,
    };
    emit(cfg, Metrics { metrics: report })
}

#[derive(Debug, Serialize)]
struct GradCheckOutput {
    grad_check: GradCheckReport,
    tolerance: f64,
    passed: bool,
}

pub fn cmd_grad_check(cfg: &RunConfig, args: &GradCheckArgs) -> Result<(), CliError> {
    let tolerance = args.tolerance.unwrap_or(1e-4);
    let prefix = args.only.clone().unwrap_or_default();
    let report = grad_check(&cfg.grad_check, |name| name.starts_with(&prefix))?;
    if report.checked == 0 {
        return Err(CliError::Usage(format!(
            "no parameter name starts with {prefix:?}"
        )));
    }
    let passed = report.max_relative_error < tolerance;
    let worst = report.worst.clone().unwrap_or_default();
    let max = report.max_relative_error;
    emit(
        cfg,
        GradCheckOutput {
            grad_check: report,
            tolerance,
            passed,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "max relative gradient error {max:.3e} at {worst} exceeds {tolerance:e}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ehrpd").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn long_help_lists_defaults() {
        let help = Cli::command().render_long_help().to_string();
        for needle in [
            "\"epochs\": 50",
            "\"batch_size\": 16",
            "\"lr\": 0.001",
            "\"kappa\": 0.75",
            "1024",
        ] {
            assert!(help.contains(needle), "{needle} missing from help");
        }
        let mut cmd = Cli::command();
        let train = cmd
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(train.contains("[default: 50]"));
        assert!(train.contains("\"weight_decay\": 0.001"));
    }

    #[test]
    fn flags_override_config() {
        let cfg = resolve(&parse(&[
            "train",
            "--epochs",
            "3",
            "--ablation",
            "as4",
            "--seed",
            "9",
        ]))
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 9);
        assert!(cfg.train.model.ablations.disable_catalyst_attention);
        let cfg = resolve(&parse(&[
            "evaluate",
            "--pd-fraction",
            "0.1",
            "0.5",
            "--metrics",
            "lpl,pd",
        ]))
        .unwrap();
        assert_eq!(cfg.evaluation.pd_fractions, vec![0.1, 0.5]);
        assert!(cfg.evaluation.lpl && !cfg.evaluation.mpl && !cfg.evaluation.time_rmse);
        let cfg = resolve(&parse(&[
            "generate",
            "--mode",
            "ancestral",
            "--horizon",
            "0",
        ]))
        .unwrap();
        assert_eq!(cfg.generation.mode, GenerationMode::Ancestral);
        assert_eq!(cfg.generation.horizon, 0);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let e = resolve(&parse(&["train", "--precision", "16"])).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = resolve(&parse(&["synth-data", "--max-visits", "1"])).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(Cli::try_parse_from(["ehrpd", "train", "--ablation", "as5"]).is_err());
        let e = cmd_train(&RunConfig::default()).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn missing_data_is_a_data_error() {
        let mut cfg = RunConfig::default();
        cfg.paths.data = Some("/nonexistent/cohort.jsonl".into());
        cfg.paths.checkpoint = Some("/nonexistent/ckpt".into());
        assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn echo_paths() {
        assert_eq!(
            echo_path(Path::new("out/cohort.jsonl")),
            PathBuf::from("out/cohort.run.json")
        );
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(echo_path(dir.path()), dir.path().join("run.json"));
    }
}
