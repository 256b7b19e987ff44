//! The generate → train → evaluate chain shared by the subcommands.

use stablerep::data::{dedup_captions, read_captions};
use stablerep::eval::{fewshot_eval, group_split, linear_probe, EvalReport, FeatureSet};
use stablerep::gen::{generate_dataset, DatasetManifest, Generator, GeneratorConfig, PromptSpec};
use stablerep::io::content_hash;
use stablerep::model::Encoder;
use stablerep::ndarray::Axis;
use stablerep::rng::derive_seed;
use stablerep::train::{
    run_training, Checkpoint, LossVariant, RunOptions, TrainConfig, TrainOutcome,
};

use crate::config::RunConfig;
use crate::error::CliResult;

/// Seed paths under the master seed.
pub mod seeds {
    pub const TRAIN_DATA: u64 = 0xD0;
    pub const EVAL_DATA: u64 = 0xE0;
    pub const TRAIN: u64 = 0x7A;
    pub const PROBE: u64 = 0x9B;
    pub const FEWSHOT: u64 = 0xF5;
}

/// Caption ids of held-out evaluation captions start here.
pub const EVAL_CAPTION_BASE: u64 = 1 << 40;

pub fn training_prompts(cfg: &RunConfig) -> CliResult<Vec<PromptSpec>> {
    let classes = cfg.generator.num_classes;
    if let Some(path) = &cfg.data.captions_file {
        let records = dedup_captions(read_captions(path, classes)?);
        return Ok(records.into_iter().map(|r| r.prompt).collect());
    }
    Ok((0..cfg.data.num_captions as u64)
        .map(|i| PromptSpec::from_text(i, &format!("caption {}/{i}", cfg.seed), classes))
        .collect())
}

fn eval_prompts(cfg: &RunConfig) -> Vec<PromptSpec> {
    (0..cfg.eval.num_captions as u64)
        .map(|i| {
            PromptSpec::from_text(
                EVAL_CAPTION_BASE + i,
                &format!("held-out caption {}/{i}", cfg.seed),
                cfg.generator.num_classes,
            )
        })
        .collect()
}

pub fn generate_training_set(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let generator = Generator::new(cfg.generator.clone())?;
    Ok(generate_dataset(
        &generator,
        &training_prompts(cfg)?,
        cfg.data.images_per_caption,
        derive_seed(cfg.seed, &[seeds::TRAIN_DATA]),
    )?)
}

/// Held-out captions sampled at the evaluation guidance scale.
pub fn generate_eval_set(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let generator = Generator::new(GeneratorConfig {
        guidance_scale: cfg.eval.guidance_scale,
        guidance_mix: Vec::new(),
        ..cfg.generator.clone()
    })?;
    Ok(generate_dataset(
        &generator,
        &eval_prompts(cfg),
        cfg.eval.images_per_caption,
        derive_seed(cfg.seed, &[seeds::EVAL_DATA]),
    )?)
}

/// Training config with the derived seed and input sizes filled in.
pub fn effective_train_config(cfg: &RunConfig) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = derive_seed(cfg.seed, &[seeds::TRAIN]);
    t.encoder.input_dim = cfg.generator.feature_dim;
    t.text_encoder.input_dim = cfg.generator.feature_dim;
    t
}

pub fn train(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    resume: Option<&Checkpoint>,
    opts: &RunOptions,
) -> CliResult<TrainOutcome> {
    Ok(run_training(
        manifest,
        &effective_train_config(cfg),
        resume,
        opts,
    )?)
}

pub fn checkpoint_id(ck: &Checkpoint) -> CliResult<String> {
    Ok(content_hash(&ck.to_bytes()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probe: EvalReport,
    pub fewshot: EvalReport,
}

pub fn extract_features(
    cfg: &RunConfig,
    encoder: &Encoder,
    eval_set: &DatasetManifest,
    checkpoint_id: &str,
) -> CliResult<FeatureSet> {
    let mut fs = FeatureSet::extract(encoder, eval_set, cfg.eval.space, checkpoint_id)?;
    fs.header.config_hash = cfg.hash()?;
    Ok(fs)
}

/// Linear probe on a caption-level split of the evaluation samples.
pub fn probe_features(cfg: &RunConfig, fs: &FeatureSet) -> CliResult<EvalReport> {
    let mut probe = cfg.eval.probe.clone();
    probe.seed = derive_seed(cfg.seed, &[seeds::PROBE]);
    let (train_rows, test_rows) = group_split(&fs.caption_ids, cfg.eval.test_fraction, probe.seed);
    let pick = |rows: &[usize]| {
        (
            fs.features.select(Axis(0), rows),
            rows.iter().map(|&i| fs.class_ids[i]).collect::<Vec<_>>(),
        )
    };
    let (tx, ty) = pick(&train_rows);
    let (vx, vy) = pick(&test_rows);
    let report = linear_probe(tx.view(), &ty, vx.view(), &vy, &probe)?;
    stamp(cfg, fs, report)
}

/// Few-shot episodes over all evaluation samples.
pub fn fewshot_features(cfg: &RunConfig, fs: &FeatureSet) -> CliResult<EvalReport> {
    let mut spec = cfg.eval.fewshot.clone();
    spec.seed = derive_seed(cfg.seed, &[seeds::FEWSHOT]);
    let report = fewshot_eval(fs.view(), &fs.class_ids, &spec)?;
    stamp(cfg, fs, report)
}

fn stamp(cfg: &RunConfig, fs: &FeatureSet, mut r: EvalReport) -> CliResult<EvalReport> {
    r.label = method_label(cfg).to_string();
    r.config_hash = cfg.hash()?;
    r.dataset_id = Some(fs.header.dataset_id.clone());
    r.checkpoint_id = Some(fs.header.checkpoint_id.clone());
    Ok(r)
}

pub fn evaluate_features(cfg: &RunConfig, fs: &FeatureSet) -> CliResult<Evaluation> {
    Ok(Evaluation {
        probe: probe_features(cfg, fs)?,
        fewshot: fewshot_features(cfg, fs)?,
    })
}

/// Series name for reports.
pub fn method_label(cfg: &RunConfig) -> &'static str {
    match cfg.train.loss {
        LossVariant::MultiPositive => "stablerep",
        LossVariant::SimclrReduction => "simclr",
        LossVariant::PairOnly => "clip",
        LossVariant::StablerepPlus => "stablerep+",
    }
}

/// Everything a single experiment produces, kept in memory.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

pub fn run_experiment(cfg: &RunConfig) -> CliResult<ExperimentResult> {
    cfg.validate()?;
    let train_set = generate_training_set(cfg)?;
    let eval_set = generate_eval_set(cfg)?;
    let outcome = train(cfg, &train_set, None, &RunOptions::default())?;
    let encoder = outcome.checkpoint.encoder()?;
    let fs = extract_features(
        cfg,
        &encoder,
        &eval_set,
        &checkpoint_id(&outcome.checkpoint)?,
    )?;
    let evaluation = evaluate_features(cfg, &fs)?;
    Ok(ExperimentResult {
        outcome,
        evaluation,
    })
}
