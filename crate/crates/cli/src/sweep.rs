//! One-axis grids over guidance, multiplicity, budget split and epochs.

use std::path::Path;

use rayon::prelude::*;
use stablerep::eval::EvalReport;
use stablerep::train::{LossVariant, RunOptions};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    checkpoint_id, evaluate_features, extract_features, generate_eval_set, generate_training_set,
    train, Evaluation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Guidance scale.
    W,
    /// Samples per caption in a batch.
    M,
    /// Images per caption at a fixed image budget.
    L,
    /// Training length in SimCLR-equivalent epochs.
    Epochs,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::W => "w",
            Axis::M => "m",
            Axis::L => "l",
            Axis::Epochs => "epochs",
        }
    }
}

/// Named guidance sets for multi-positive runs.
pub const GUIDANCE_SETS: [(&str, &[f64]); 3] = [
    ("small", &[1.5, 2.0, 3.0]),
    ("large", &[6.0, 8.0, 10.0]),
    ("mixed", &[1.5, 2.0, 3.0, 6.0, 8.0, 10.0]),
];

#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// Directory-safe name such as `m=6`.
    pub name: String,
    pub axis_value: f64,
    pub config: RunConfig,
}

fn parse_num<T: std::str::FromStr>(axis: Axis, token: &str) -> CliResult<T> {
    token
        .parse()
        .map_err(|_| CliError::Usage(format!("sweep {}: bad value {token:?}", axis.as_str())))
}

fn multi_positive(loss: LossVariant) -> LossVariant {
    match loss {
        LossVariant::MultiPositive | LossVariant::StablerepPlus => loss,
        _ => LossVariant::MultiPositive,
    }
}

/// The single-positive baseline at the same batch size.
fn as_simclr(cfg: &mut RunConfig, batch: usize) {
    cfg.train.loss = LossVariant::SimclrReduction;
    cfg.train.batch.samples_per_caption = 2;
    cfg.train.batch.num_captions = (batch / 2).max(1);
}

fn with_multiplicity(cfg: &mut RunConfig, m: usize, batch: usize) -> CliResult<()> {
    if m == 0 || batch / m == 0 {
        return Err(CliError::Usage(format!(
            "m={m} does not fit a batch of {batch}"
        )));
    }
    cfg.train.loss = multi_positive(cfg.train.loss);
    cfg.train.batch.samples_per_caption = m;
    cfg.train.batch.num_captions = batch / m;
    Ok(())
}

/// Expand `values` into one config per grid point.
///
/// - `w`: for the single-positive loss each value is a guidance scale and
///   gets its own one-image-per-caption dataset; otherwise values are scales
///   or the names in [`GUIDANCE_SETS`], drawn per sample.
/// - `m`: batch size is held at `n * m` of the base config; `m = 1` is the
///   single-positive baseline.
/// - `l`: the image budget `captions * images_per_caption` is fixed and
///   epochs scale with `l` so every point does the same number of forwards;
///   `m = l`, and `l = 1` is the single-positive baseline.
/// - `epochs`: the training length.
pub fn sweep_points(base: &RunConfig, axis: Axis, values: &str) -> CliResult<Vec<SweepPoint>> {
    let tokens: Vec<&str> = values
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let batch = base.train.batch.total();
    let mut points = Vec::with_capacity(tokens.len());
    for token in tokens {
        let mut cfg = base.clone();
        let axis_value = match axis {
            Axis::W => {
                if cfg.train.loss == LossVariant::SimclrReduction {
                    let w: f64 = parse_num(axis, token)?;
                    cfg.generator.guidance_scale = w;
                    cfg.generator.guidance_mix.clear();
                    cfg.data.images_per_caption = 1;
                    w
                } else if let Some((_, set)) = GUIDANCE_SETS.iter().find(|(n, _)| *n == token) {
                    cfg.generator.guidance_mix = set.to_vec();
                    set.iter().sum::<f64>() / set.len() as f64
                } else {
                    let w: f64 = parse_num(axis, token)?;
                    cfg.generator.guidance_scale = w;
                    cfg.generator.guidance_mix.clear();
                    w
                }
            }
            Axis::M => {
                let m: usize = parse_num(axis, token)?;
                if m == 1 {
                    as_simclr(&mut cfg, batch);
                } else {
                    with_multiplicity(&mut cfg, m, batch)?;
                }
                m as f64
            }
            Axis::L => {
                if cfg.data.captions_file.is_some() {
                    return Err(CliError::Usage("sweep l needs synthetic captions".into()));
                }
                let l: usize = parse_num(axis, token)?;
                let budget = base.data.num_captions * base.data.images_per_caption;
                if l == 0 || budget / l == 0 {
                    return Err(CliError::Usage(format!(
                        "l={l} does not fit a budget of {budget}"
                    )));
                }
                cfg.data.num_captions = budget / l;
                cfg.data.images_per_caption = l;
                cfg.train.epochs = base.train.epochs * l as u64;
                if l == 1 {
                    as_simclr(&mut cfg, batch);
                } else {
                    with_multiplicity(&mut cfg, l, batch)?;
                }
                l as f64
            }
            Axis::Epochs => {
                let e: u64 = parse_num(axis, token)?;
                cfg.train.epochs = e;
                e as f64
            }
        };
        cfg.validate()?;
        cfg.train.validate()?;
        points.push(SweepPoint {
            name: format!("{}={token}", axis.as_str()),
            axis_value,
            config: cfg,
        });
    }
    Ok(points)
}

/// Train and evaluate one point. With `dir`, the metrics log, final
/// checkpoint and both reports are written there.
pub fn run_point(axis: Axis, point: &SweepPoint, dir: Option<&Path>) -> CliResult<Evaluation> {
    let cfg = &point.config;
    let train_set = generate_training_set(cfg)?;
    let eval_set = generate_eval_set(cfg)?;
    let opts = RunOptions {
        out_dir: dir.map(Path::to_path_buf),
        checkpoint_every: None,
    };
    let outcome = train(cfg, &train_set, None, &opts)?;
    let encoder = outcome.checkpoint.encoder()?;
    let fs = extract_features(
        cfg,
        &encoder,
        &eval_set,
        &checkpoint_id(&outcome.checkpoint)?,
    )?;
    let mut eval = evaluate_features(cfg, &fs)?;
    for r in [&mut eval.probe, &mut eval.fewshot] {
        r.axis = Some(axis.as_str().to_string());
        r.axis_value = Some(point.axis_value);
    }
    if let Some(dir) = dir {
        eval.probe.write(&dir.join("probe.json"))?;
        eval.fewshot.write(&dir.join("fewshot.json"))?;
    }
    Ok(eval)
}

/// Run every point on `jobs` threads. Results come back in grid order.
pub fn run_sweep(
    axis: Axis,
    points: &[SweepPoint],
    out: Option<&Path>,
    jobs: usize,
) -> CliResult<Vec<Evaluation>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let dir = out.map(|o| o.join("runs").join(&p.name));
                if let Some(d) = &dir {
                    std::fs::create_dir_all(d)?;
                }
                run_point(axis, p, dir.as_deref())
            })
            .collect()
    })
}

/// Probe reports first, then few-shot, each in grid order.
pub fn summary_reports(evals: &[Evaluation]) -> Vec<EvalReport> {
    evals
        .iter()
        .map(|e| e.probe.clone())
        .chain(evals.iter().map(|e| e.fewshot.clone()))
        .collect()
}
