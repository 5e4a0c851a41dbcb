//! Command-line driver: config loading, experiment orchestration and output
//! files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rotmole::analysis::{self, ThetaSummary};
use rotmole::autograd::grad_check_random;
use rotmole::synth::{analytic_baseline_floor, make_rotation_separable_tasks, DatasetConfig, TaskSet};
use rotmole::trainer::{self, ThetaRecord, TrainConfig, TrainOutcome};
use rotmole::{count_trainable_routing_params, AdapterConfig, CheckReport, GateMode, Layer64, Rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Finite-difference step used by `gradcheck`.
pub const GRADCHECK_H: f64 = 1e-5;
/// Monte-Carlo inputs per task for the baseline floor in `compare`.
pub const FLOOR_SAMPLES: usize = 20_000;

#[derive(Debug, Parser)]
#[command(name = "rotmole", version, about = "Rotation-gated mixture of low-rank experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic and finite-difference gradients on random layers.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train one adapter on the synthetic tasks.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train scaling_only, mlp_gate and rotmole from the same seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize logged rotation angles per task and snapshot.
    Analyze {
        #[arg(long)]
        thetas: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        snapshots: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        bins: usize,
        /// Output file; defaults to summary.csv next to the thetas file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print routing parameter counts for every gate mode.
    Paramcount {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    Usage(String),
    /// A run that aborted for numerical reasons.
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<rotmole::Error> for CliError {
    fn from(e: rotmole::Error) -> Self {
        match e {
            rotmole::Error::NonFinite { .. } | rotmole::Error::Degenerate(_) => CliError::Failed(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    CheckFailed,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::CheckFailed => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub adapter: AdapterConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Expert whose angle is logged; overrides `train.probe_expert`.
    #[serde(default)]
    pub probe_expert: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Usage(format!("config field `{}`: {}", e.path(), e.inner())))?;
        cfg.train.probe_expert = cfg.probe_expert;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.adapter.validate()?;
        self.dataset.validate()?;
        self.train.validate()?;
        if self.adapter.d != self.dataset.d {
            return Err(CliError::Usage(format!(
                "adapter.d = {} but dataset.d = {}",
                self.adapter.d, self.dataset.d
            )));
        }
        if self.adapter.r != self.dataset.r {
            return Err(CliError::Usage(format!(
                "adapter.r = {} but dataset.r = {}",
                self.adapter.r, self.dataset.r
            )));
        }
        if self.probe_expert >= self.adapter.n {
            return Err(CliError::Usage(format!(
                "probe_expert = {} but adapter.n = {}",
                self.probe_expert, self.adapter.n
            )));
        }
        Ok(())
    }

    /// Seeds written into every output header.
    pub fn header(&self, mode: GateMode) -> Value {
        json!({ "init_seed": self.train.seed, "data_seed": self.dataset.seed, "mode": mode.name() })
    }
}

/// Synthetic tasks for `cfg` and a fresh layer sharing their base weight.
pub fn prepare(cfg: &ExperimentConfig, mode: GateMode) -> Result<(TaskSet<f64>, Layer64), CliError> {
    let tasks = make_rotation_separable_tasks(&cfg.dataset, &mut Rng::new(cfg.dataset.seed))?;
    let adapter = cfg.adapter.with_mode(mode);
    let layer = Layer64::init_with_base(&adapter, tasks.base.clone(), &mut Rng::new(cfg.train.seed))?;
    Ok((tasks, layer))
}

pub fn run_training(cfg: &ExperimentConfig, mode: GateMode) -> Result<TrainOutcome<f64>, CliError> {
    let (tasks, layer) = prepare(cfg, mode)?;
    Ok(trainer::train(layer, &tasks, &cfg.dataset, &cfg.train)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| io_err(path, e))
}

/// Aggregates per-trial reports: worst error per group, pass only if every
/// trial passed.
pub fn merge_reports(reports: &[CheckReport]) -> CheckReport {
    let mut merged = CheckReport { groups: Vec::new(), pass: !reports.is_empty() };
    for rep in reports {
        merged.pass &= rep.pass;
        for g in &rep.groups {
            match merged.groups.iter_mut().find(|m| m.name == g.name) {
                Some(m) => m.max_rel_err = m.max_rel_err.max(g.max_rel_err),
                None => merged.groups.push(g.clone()),
            }
        }
    }
    merged
}

pub fn cmd_gradcheck(config: &Path, trials: usize, tol: f64) -> Result<Status, CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(CliError::Usage("--tol must be non-negative".into()));
    }
    let cfg = ExperimentConfig::load(config)?;
    let mut rng = Rng::new(cfg.train.seed);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        reports.push(grad_check_random(&cfg.adapter, &mut rng.fork(), GRADCHECK_H, tol)?);
    }
    let merged = merge_reports(&reports);
    println!("{}", serde_json::to_string(&merged).map_err(|e| CliError::Failed(e.to_string()))?);
    Ok(if merged.pass { Status::Success } else { Status::CheckFailed })
}

fn write_outcome(cfg: &ExperimentConfig, mode: GateMode, out: &TrainOutcome<f64>) -> Result<(), CliError> {
    let header = cfg.header(mode);
    let metrics_path = cfg.output_dir.join("metrics.jsonl");
    let mut w = create(&metrics_path)?;
    trainer::write_jsonl(Some(&header), &out.metrics, &mut w)?;
    finish(w, &metrics_path)?;

    let thetas_path = cfg.output_dir.join("thetas.jsonl");
    let mut w = create(&thetas_path)?;
    trainer::write_jsonl(Some(&header), &out.thetas, &mut w)?;
    finish(w, &thetas_path)?;

    out.layer.save(cfg.output_dir.join("layer.json"))?;
    Ok(())
}

pub fn cmd_train(config: &Path) -> Result<Status, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let out = run_training(&cfg, cfg.adapter.mode)?;
    write_outcome(&cfg, cfg.adapter.mode, &out)?;
    let last = out.final_metrics();
    println!("{}", json!({ "step": last.step, "loss": last.loss, "task_mse": last.task_mse }));
    Ok(Status::Success)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: GateMode,
    pub routing_params: usize,
    pub final_loss: f64,
    pub task_mse: std::collections::BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub header: Value,
    pub analytic_baseline_floor: f64,
    pub modes: Vec<ModeResult>,
}

pub fn compare(cfg: &ExperimentConfig) -> Result<CompareReport, CliError> {
    let tasks = make_rotation_separable_tasks::<f64>(&cfg.dataset, &mut Rng::new(cfg.dataset.seed))?;
    let floor = analytic_baseline_floor(&tasks, &cfg.dataset, FLOOR_SAMPLES)?;
    let mut modes = Vec::new();
    for mode in [GateMode::ScalingOnly, GateMode::MlpGate, GateMode::Rotmole] {
        let out = run_training(cfg, mode)?;
        let last = out.final_metrics();
        modes.push(ModeResult {
            mode,
            routing_params: count_trainable_routing_params(&cfg.adapter.with_mode(mode)),
            final_loss: last.loss,
            task_mse: last.task_mse.clone(),
        });
    }
    let header = json!({ "init_seed": cfg.train.seed, "data_seed": cfg.dataset.seed });
    Ok(CompareReport { header, analytic_baseline_floor: floor, modes })
}

pub fn cmd_compare(config: &Path) -> Result<Status, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let report = compare(&cfg)?;
    let path = cfg.output_dir.join("compare.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::Failed(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    finish(w, &path)?;
    for m in &report.modes {
        println!("{:<13} routing_params={:<6} final_loss={}", m.mode.name(), m.routing_params, m.final_loss);
    }
    println!("analytic_baseline_floor={}", report.analytic_baseline_floor);
    Ok(Status::Success)
}

/// Reads theta records, skipping blank lines and `{"header": ...}` lines.
pub fn read_thetas(path: &Path) -> Result<Vec<ThetaRecord>, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if value.get("header").is_some() {
            continue;
        }
        let rec: ThetaRecord = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no theta records", path.display())));
    }
    Ok(records)
}

pub fn cmd_analyze(thetas: &Path, snapshots: &[usize], bins: usize, out: Option<&Path>) -> Result<Status, CliError> {
    let records = read_thetas(thetas)?;
    let report = analysis::summarize(&records, snapshots, bins)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.summaries.is_empty() {
        return Err(CliError::Usage("none of the requested snapshots have records".into()));
    }
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => thetas.parent().unwrap_or(Path::new(".")).join("summary.csv"),
    };
    let mut w = create(&path)?;
    analysis::write_csv(&report.summaries, bins, &mut w)?;
    finish(w, &path)?;
    print_snapshot_stats(&records, &report.summaries);
    Ok(Status::Success)
}

fn print_snapshot_stats(records: &[ThetaRecord], summaries: &[ThetaSummary]) {
    let mut steps: Vec<usize> = summaries.iter().map(|s| s.step).collect();
    steps.dedup();
    for step in steps {
        let separation = analysis::separation(records, step).ok();
        let pooled_std = analysis::pooled_std(records, step);
        println!("{}", json!({ "step": step, "pooled_std": pooled_std, "separation": separation }));
    }
}

pub fn paramcounts(adapter: &AdapterConfig) -> Value {
    let mut counts = serde_json::Map::new();
    for mode in GateMode::ALL {
        counts.insert(mode.name().to_string(), json!(count_trainable_routing_params(&adapter.with_mode(mode))));
    }
    counts.insert("mlp_hidden".into(), json!(rotmole::mlp_hidden_dim(adapter)));
    Value::Object(counts)
}

pub fn cmd_paramcount(config: &Path) -> Result<Status, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    println!("{}", paramcounts(&cfg.adapter));
    Ok(Status::Success)
}

pub fn run(cli: &Cli) -> Result<Status, CliError> {
    match &cli.command {
        Command::Gradcheck { config, trials, tol } => cmd_gradcheck(config, *trials, *tol),
        Command::Train { config } => cmd_train(config),
        Command::Compare { config } => cmd_compare(config),
        Command::Analyze { thetas, snapshots, bins, out } => cmd_analyze(thetas, snapshots, *bins, out.as_deref()),
        Command::Paramcount { config } => cmd_paramcount(config),
    }
}
