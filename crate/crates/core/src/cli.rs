//! The `selattn` command line.
//!
//! Exit codes: 0 success, 2 bad input (arguments, config, missing or
//! unreadable files), 3 bad state (checkpoint does not fit the config,
//! corrupted checkpoint, training failure).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::evalbench::{bench_configs, compare, evaluate, to_csv, BenchComparison, BenchConfig, BenchReport, EvalError, OracleModel, Pipeline};
use crate::geometry::BBox;
use crate::model::ModelParams;
use crate::rpn::propose;
use crate::synthdata::{decode_pgm, generate_dataset, read_dataset, write_dataset, Sample, SynthError};
use crate::training::{init_params, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_STATE: i32 = 3;

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    State(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::State(_) => EXIT_STATE,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(format!("config: {e}"))
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } | CheckpointError::Config(_) => CliError::Input(format!("checkpoint: {e}")),
            _ => CliError::State(format!("checkpoint: {e}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::State(format!("training: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptyDataset | EvalError::EmptySample | EvalError::NoRepetitions => CliError::Input(e.to_string()),
            EvalError::Detector { .. } => CliError::State(e.to_string()),
        }
    }
}

fn io_input(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "selattn", version, about = "Selective-attention organ detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PGM images plus annotations.jsonl).
    GenData(GenDataArgs),
    /// Train a model, writing checkpoints and a JSON-lines loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; prints an EvalReport as JSON.
    Eval(EvalArgs),
    /// Print the scored proposals for one image as JSON.
    Propose(ProposeArgs),
    /// Compare the restricted and baseline proposal stages.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Overrides the config seed.
    #[arg(long, env = "SELATTN_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config step count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Score the dataset's own annotations instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to the config with the identity region and six anchors.
    #[arg(long)]
    pub baseline_config: Option<PathBuf>,
    /// Trained weights for the restricted config; random init otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub baseline_checkpoint: Option<PathBuf>,
    /// Dataset to run on; synthetic images from the config otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Directory for bench.csv and bench.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn read_nonempty(dir: &Path) -> Result<Vec<Sample>, CliError> {
    let data = read_dataset(dir)?;
    if data.is_empty() {
        return Err(CliError::Input(format!("{}: dataset has no samples", dir.display())));
    }
    Ok(data)
}

#[derive(Serialize)]
struct GenSummary<'a> {
    out: &'a Path,
    count: usize,
    seed: u64,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.seed.unwrap_or(cfg.seed);
    let samples = generate_dataset(&cfg.scene, a.count, seed)?;
    write_dataset(&samples, &a.out)?;
    print_json(&GenSummary {
        out: &a.out,
        count: samples.len(),
        seed,
    });
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    seed: u64,
    final_loss: Option<f64>,
    checkpoints: Vec<PathBuf>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let data = read_nonempty(&a.data)?;
    fs::create_dir_all(&a.out).map_err(io_input(&a.out))?;
    let snapshot = a.out.join("config.json");
    fs::write(&snapshot, cfg.to_json() + "\n").map_err(io_input(&snapshot))?;

    let mut trainer = cfg.trainer();

    let log_path = a.out.join(LOSS_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_input(&log_path))?);
    let mut checkpoints = Vec::new();
    let mut failure: Option<CliError> = None;
    let mut final_loss = None;
    trainer.train(&data, cfg.steps, |report, params| {
        if failure.is_some() {
            return;
        }
        final_loss = Some(report.loss);
        let line = serde_json::to_string(report).expect("report serializes");
        if let Err(e) = writeln!(log, "{line}") {
            failure = Some(CliError::Input(format!("{}: {e}", log_path.display())));
            return;
        }
        if cfg.checkpoint_every > 0 && report.step % cfg.checkpoint_every == 0 && report.step < cfg.steps {
            let dir = a.out.join(format!("step-{:06}", report.step));
            let ck = Checkpoint {
                config: cfg.clone(),
                step: report.step,
                params: params.clone(),
            };
            match save_checkpoint(&dir, &ck) {
                Ok(()) => checkpoints.push(dir),
                Err(e) => failure = Some(e.into()),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush().map_err(io_input(&log_path))?;
    let dir = a.out.join(FINAL_CHECKPOINT);
    save_checkpoint(
        &dir,
        &Checkpoint {
            config: cfg.clone(),
            step: trainer.step,
            params: trainer.params.clone(),
        },
    )?;
    checkpoints.push(dir);
    print_json(&TrainSummary {
        steps: trainer.step,
        seed: cfg.seed,
        final_loss,
        checkpoints,
    });
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let data = read_nonempty(&a.data)?;
    let report = match &a.checkpoint {
        Some(path) if !a.oracle => {
            let ck = load_checkpoint(path)?;
            evaluate(
                &Pipeline {
                    params: ck.params,
                    proposal: ck.config.proposal(),
                },
                &data,
            )?
        }
        _ => evaluate(&OracleModel::from_samples(&data), &data)?,
    };
    print_json(&report);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoredBox {
    bbox: BBox,
    score: f64,
}

pub fn cmd_propose(a: &ProposeArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let bytes = fs::read(&a.image).map_err(io_input(&a.image))?;
    let image = decode_pgm(&bytes, &a.image)?;
    let ps = propose(&image, &ck.params, &ck.config.proposal()).map_err(|e| CliError::State(e.to_string()))?;
    let boxes: Vec<ScoredBox> = ps
        .proposals
        .iter()
        .map(|p| ScoredBox {
            bbox: p.bbox,
            score: p.score,
        })
        .collect();
    let text = serde_json::to_string_pretty(&boxes).expect("boxes serialize");
    match &a.out {
        Some(path) => fs::write(path, text + "\n").map_err(io_input(path))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchOutput {
    reports: Vec<BenchReport>,
    comparison: BenchComparison,
}

fn bench_params(cfg: &RunConfig, checkpoint: Option<&Path>, seed: u64, name: &str) -> Result<ModelParams, CliError> {
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.shape() != cfg.shape() {
                return Err(CliError::State(format!(
                    "{}: checkpoint shape {:?} does not match the {name} config {:?}",
                    path.display(),
                    ck.params.shape(),
                    cfg.shape()
                )));
            }
            Ok(ck.params)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(init_params(&cfg.shape(), &mut rng, &cfg.optimizer))
        }
    }
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let base = match &a.baseline_config {
        Some(p) => RunConfig::load(p)?,
        None => cfg.baseline(),
    };
    let seed = a.seed.seed.unwrap_or(cfg.seed);
    let images = match &a.data {
        Some(dir) => read_nonempty(dir)?,
        None => generate_dataset(&cfg.scene, a.images, seed)?,
    };
    let restricted_params = bench_params(&cfg, a.checkpoint.as_deref(), seed, "restricted")?;
    let baseline_params = bench_params(&base, a.baseline_checkpoint.as_deref(), seed, "baseline")?;
    let configs = [
        BenchConfig {
            name: "restricted".into(),
            params: &restricted_params,
            proposal: cfg.proposal(),
        },
        BenchConfig {
            name: "baseline".into(),
            params: &baseline_params,
            proposal: base.proposal(),
        },
    ];
    let reports = bench_configs(&configs, &images, a.reps, a.warmup)?;
    let comparison = compare(&reports[0], &reports[1]);
    fs::create_dir_all(&a.out).map_err(io_input(&a.out))?;
    let csv = to_csv(&reports);
    let csv_path = a.out.join("bench.csv");
    fs::write(&csv_path, &csv).map_err(io_input(&csv_path))?;
    let out = BenchOutput { reports, comparison };
    let json_path = a.out.join("bench.json");
    let text = serde_json::to_string_pretty(&out).expect("bench output serializes");
    fs::write(&json_path, text + "\n").map_err(io_input(&json_path))?;
    print!("{csv}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Propose(a) => cmd_propose(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let e: CliError = RunConfig::from_json(r#"{"steps": "x"}"#).unwrap_err().into();
        assert_eq!(e.exit_code(), EXIT_INPUT);
        assert!(e.to_string().contains("steps"));
        let e: CliError = CheckpointError::Checksum { tensor: "rpn.cls.weight".into() }.into();
        assert_eq!(e.exit_code(), EXIT_STATE);
        assert!(Cli::try_parse_from(["selattn", "nonsense"]).is_err());
        assert!(Cli::try_parse_from(["selattn", "eval", "--data", "d"]).is_err());
        let cli = Cli::try_parse_from(["selattn", "eval", "--oracle", "--data", "/nonexistent/data"]).unwrap();
        assert_eq!(run(&cli).unwrap_err().exit_code(), EXIT_INPUT);
    }
}
