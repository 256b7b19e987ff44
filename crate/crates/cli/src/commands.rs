//! Argument definitions and the subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stablerep::eval::{emit_report, EvalReport, FeatureSet, ReportFormat};
use stablerep::gen::DatasetManifest;
use stablerep::train::{Checkpoint, RunOptions, CHECKPOINT_FILE, METRICS_FILE};

use crate::config::{RunConfig, SEED_ENV};
use crate::error::{read_input, CliError, CliResult};
use crate::output::{write_file_atomic, write_run_files, OutputDir, Provenance};
use crate::pipeline::{
    checkpoint_id, extract_features, fewshot_features, generate_eval_set, generate_training_set,
    probe_features, train,
};
use crate::sweep::{run_sweep, summary_reports, sweep_points, Axis};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EVAL_MANIFEST_FILE: &str = "eval-manifest.jsonl";
pub const FEATURES_FILE: &str = "features.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "stablerep",
    version,
    about = "Multi-positive contrastive learning on a toy text-to-sample generator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the training and held-out manifests.
    Generate(GenerateArgs),
    /// Train an encoder; writes checkpoints and a metrics log.
    Train(TrainArgs),
    /// Linear-probe evaluation of a checkpoint or feature file.
    Probe(EvalArgs),
    /// Episodic few-shot evaluation of a checkpoint or feature file.
    Fewshot(EvalArgs),
    /// Train and evaluate over a grid along one axis.
    Sweep(SweepArgs),
    /// Render report files as a table, CSV or SVG plot.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; must not exist unless --force.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training manifest; generated from the config when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from this checkpoint. The metrics log beside it is carried over.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep an intermediate checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint whose encoder produces the features.
    #[arg(
        long,
        required_unless_present = "features",
        conflicts_with = "features"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed feature file.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Held-out manifest to encode; generated from the config when absent.
    #[arg(long, requires = "checkpoint")]
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated grid values.
    #[arg(long)]
    pub values: String,
    /// Grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// table, csv or svg.
    #[arg(long, default_value = "table")]
    pub format: String,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Report JSON files, rendered in the order given.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Run a parsed command. The returned JSON is printed on success.
pub fn dispatch(cli: Cli) -> CliResult<serde_json::Value> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Probe(a) => eval_cmd(&a, EvalKind::Probe),
        Command::Fewshot(a) => eval_cmd(&a, EvalKind::Fewshot),
        Command::Sweep(a) => sweep(&a),
        Command::Report(a) => report(&a),
    }
}

fn generate(a: &GenerateArgs) -> CliResult<serde_json::Value> {
    let cfg = a.run.config()?;
    let out = OutputDir::create(&a.run.out, a.run.force)?;
    let train_set = generate_training_set(&cfg)?;
    let eval_set = generate_eval_set(&cfg)?;
    train_set.write(&out.join(MANIFEST_FILE))?;
    eval_set.write(&out.join(EVAL_MANIFEST_FILE))?;
    write_run_files(out.path(), &cfg, &Provenance::new("generate", &cfg)?)?;
    let dir = out.commit()?;
    Ok(json!({
        "command": "generate",
        "out": dir,
        "samples": train_set.records().len(),
        "eval_samples": eval_set.records().len(),
        "dataset_id": train_set.header().config_hash,
    }))
}

fn train_cmd(a: &TrainArgs) -> CliResult<serde_json::Value> {
    let cfg = a.run.config()?;
    // Read inputs before the output replaces anything they might live in.
    let resume = a
        .resume
        .as_deref()
        .map(|p| read_input(p, Checkpoint::read))
        .transpose()?;
    let prior_metrics = match &a.resume {
        Some(p) => {
            let log = p.parent().unwrap_or(Path::new(".")).join(METRICS_FILE);
            Some(std::fs::read(&log).map_err(|e| {
                CliError::Usage(format!("cannot read {} to resume: {e}", log.display()))
            })?)
        }
        None => None,
    };
    let manifest = a
        .manifest
        .as_deref()
        .map(|p| read_input(p, DatasetManifest::read))
        .transpose()?;

    let out = OutputDir::create(&a.run.out, a.run.force)?;
    let manifest = match manifest {
        Some(m) => m,
        None => {
            let m = generate_training_set(&cfg)?;
            m.write(&out.join(MANIFEST_FILE))?;
            m
        }
    };
    if let Some(bytes) = &prior_metrics {
        std::fs::write(out.join(METRICS_FILE), bytes)?;
    }
    let opts = RunOptions {
        out_dir: Some(out.path().to_path_buf()),
        checkpoint_every: a.checkpoint_every,
    };
    let outcome = train(&cfg, &manifest, resume.as_ref(), &opts)?;
    let mut prov = Provenance::new("train", &cfg)?.input("dataset", &manifest.header().config_hash);
    if let Some(ck) = &resume {
        prov = prov.input("resume_checkpoint", &checkpoint_id(ck)?);
    }
    write_run_files(out.path(), &cfg, &prov)?;
    let id = checkpoint_id(&outcome.checkpoint)?;
    let dir = out.commit()?;
    Ok(json!({
        "command": "train",
        "out": dir,
        "steps": outcome.checkpoint.step,
        "final_loss": outcome.metrics.last().map(|m| m.loss),
        "checkpoint": dir.join(CHECKPOINT_FILE),
        "checkpoint_id": id,
    }))
}

#[derive(Clone, Copy)]
enum EvalKind {
    Probe,
    Fewshot,
}

fn eval_cmd(a: &EvalArgs, kind: EvalKind) -> CliResult<serde_json::Value> {
    let cfg = a.run.config()?;
    let (name, file) = match kind {
        EvalKind::Probe => ("probe", "probe.json"),
        EvalKind::Fewshot => ("fewshot", "fewshot.json"),
    };
    let mut prov = Provenance::new(name, &cfg)?;
    let (fs, computed) = match (&a.features, &a.checkpoint) {
        (Some(path), _) => (read_input(path, FeatureSet::read)?, false),
        (None, Some(path)) => {
            let ck = read_input(path, Checkpoint::read)?;
            let eval_set = match &a.eval_manifest {
                Some(p) => read_input(p, DatasetManifest::read)?,
                None => generate_eval_set(&cfg)?,
            };
            let id = checkpoint_id(&ck)?;
            prov = prov.input("checkpoint", &id);
            (
                extract_features(&cfg, &ck.encoder()?, &eval_set, &id)?,
                true,
            )
        }
        (None, None) => return Err(CliError::Usage("need --checkpoint or --features".into())),
    };
    prov = prov.input("dataset", &fs.header.dataset_id);
    let report = match kind {
        EvalKind::Probe => probe_features(&cfg, &fs)?,
        EvalKind::Fewshot => fewshot_features(&cfg, &fs)?,
    };
    let out = OutputDir::create(&a.run.out, a.run.force)?;
    if computed {
        fs.write(&out.join(FEATURES_FILE))?;
    }
    report.write(&out.join(file))?;
    write_run_files(out.path(), &cfg, &prov)?;
    let dir = out.commit()?;
    Ok(json!({
        "command": name,
        "out": dir,
        "accuracy": report.accuracy,
        "ci95": report.ci95,
        "selected_lambda": report.selected_lambda,
    }))
}

fn sweep(a: &SweepArgs) -> CliResult<serde_json::Value> {
    let cfg = a.run.config()?;
    let points = sweep_points(&cfg, a.axis, &a.values)?;
    let out = OutputDir::create(&a.run.out, a.run.force)?;
    let evals = run_sweep(a.axis, &points, Some(out.path()), a.jobs)?;
    for p in &points {
        std::fs::write(
            out.path().join("runs").join(&p.name).join("config.toml"),
            p.config.to_toml()?,
        )?;
    }
    let reports = summary_reports(&evals);
    std::fs::write(
        out.join("summary.txt"),
        emit_report(&reports, ReportFormat::Table)?,
    )?;
    std::fs::write(
        out.join("summary.csv"),
        emit_report(&reports, ReportFormat::Csv)?,
    )?;
    let probes: Vec<EvalReport> = evals.iter().map(|e| e.probe.clone()).collect();
    let fewshots: Vec<EvalReport> = evals.iter().map(|e| e.fewshot.clone()).collect();
    std::fs::write(
        out.join("probe.svg"),
        emit_report(&probes, ReportFormat::Svg)?,
    )?;
    std::fs::write(
        out.join("fewshot.svg"),
        emit_report(&fewshots, ReportFormat::Svg)?,
    )?;
    write_run_files(out.path(), &cfg, &Provenance::new("sweep", &cfg)?)?;
    let dir = out.commit()?;
    let rows: Vec<serde_json::Value> = points
        .iter()
        .zip(&evals)
        .map(|(p, e)| {
            json!({
                "point": p.name,
                "label": e.probe.label,
                "probe": e.probe.accuracy,
                "fewshot": e.fewshot.accuracy,
            })
        })
        .collect();
    Ok(json!({ "command": "sweep", "out": dir, "axis": a.axis.as_str(), "points": rows }))
}

fn report(a: &ReportArgs) -> CliResult<serde_json::Value> {
    let format: ReportFormat = a.format.parse()?;
    let reports = a
        .reports
        .iter()
        .map(|p| read_input(p, EvalReport::read))
        .collect::<CliResult<Vec<_>>>()?;
    let text = emit_report(&reports, format)?;
    match &a.out {
        Some(path) => {
            write_file_atomic(path, text.as_bytes(), a.force)?;
            Ok(json!({ "command": "report", "out": path, "reports": reports.len() }))
        }
        None => {
            print!("{text}");
            Ok(serde_json::Value::Null)
        }
    }
}
