use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, EncoderState};
use super::optim::{adamw_step, OptimizerState};
use super::plan::ForwardPlan;
use super::schedule::LrSchedule;
use super::{LossVariant, TrainConfig};
use crate::data::{augment, pick_samples, CaptionStream};
use crate::gen::{DatasetManifest, Generator};
use crate::io::{config_hash, parse_error, read_lines, write_json_line};
use crate::model::{Encoder, ForwardCache, Mode};
use crate::objective::{
    multi_positive_loss, pair_contrastive_loss, stablerep_plus_loss, GradTarget,
};
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch_equiv: f64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Learning rate at `step` when one SimCLR-equivalent epoch spans
/// `steps_per_epoch` optimizer steps.
pub fn lr_at(step: u64, cfg: &TrainConfig, steps_per_epoch: f64) -> f64 {
    schedule_for(cfg, steps_per_epoch).at(step)
}

fn schedule_for(cfg: &TrainConfig, steps_per_epoch: f64) -> LrSchedule {
    LrSchedule {
        peak: cfg.peak_lr(),
        warmup_steps: (cfg.warmup_epochs * steps_per_epoch).round() as u64,
        total_steps: (cfg.epochs as f64 * steps_per_epoch).round() as u64,
    }
}

struct Assembled {
    images: Array2<f64>,
    image_ids: Vec<u64>,
    texts: Option<(Array2<f64>, Vec<u64>)>,
}

/// Training state between optimizer steps.
pub struct Trainer {
    config: TrainConfig,
    config_hash: String,
    dataset_hash: String,
    plan: ForwardPlan,
    schedule: LrSchedule,
    encoder: Encoder,
    text_encoder: Option<Encoder>,
    optimizer: OptimizerState,
    text_optimizer: Option<OptimizerState>,
    step: u64,
    stream: CaptionStream,
    /// Text-encoder input per manifest caption group.
    text_inputs: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(manifest: &DatasetManifest, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(
            config.encoder.clone(),
            derive_seed(config.seed, &[stream::INIT, 0]),
        )?;
        let text_encoder = if config.uses_text() {
            Some(Encoder::new(
                config.text_encoder.clone(),
                derive_seed(config.seed, &[stream::INIT, 1]),
            )?)
        } else {
            None
        };
        Self::assemble_state(manifest, config, encoder, text_encoder, None, None, 0)
    }

    /// Continue a run from a checkpoint taken on the same manifest.
    pub fn from_checkpoint(manifest: &DatasetManifest, ck: &Checkpoint) -> Result<Self> {
        if ck.dataset_hash != manifest.header().config_hash {
            return Err(Error::InvalidConfig(
                "checkpoint was trained on a different manifest".into(),
            ));
        }
        let config = ck.config.clone();
        let encoder = ck.encoder.restore(&config.encoder)?;
        let text_encoder = match (&ck.text_encoder, config.uses_text()) {
            (Some(s), true) => Some(s.restore(&config.text_encoder)?),
            (None, false) => None,
            _ => {
                return Err(Error::InvalidConfig(
                    "checkpoint text encoder mismatch".into(),
                ))
            }
        };
        let t = Self::assemble_state(
            manifest,
            config,
            encoder,
            text_encoder,
            Some(ck.optimizer.clone()),
            ck.text_optimizer.clone(),
            ck.step,
        )?;
        if t.config_hash != ck.config_hash {
            return Err(Error::InvalidConfig(
                "checkpoint config hash mismatch".into(),
            ));
        }
        Ok(t)
    }

    fn assemble_state(
        manifest: &DatasetManifest,
        config: TrainConfig,
        encoder: Encoder,
        text_encoder: Option<Encoder>,
        optimizer: Option<OptimizerState>,
        text_optimizer: Option<OptimizerState>,
        step: u64,
    ) -> Result<Self> {
        let n = manifest.num_captions();
        let dim = manifest.feature_dim();
        if config.encoder.input_dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: config.encoder.input_dim,
            });
        }
        if n < config.batch.num_captions {
            return Err(Error::Insufficient(format!(
                "batch needs {} captions, manifest has {n}",
                config.batch.num_captions
            )));
        }
        let per_visit = match config.loss {
            LossVariant::SimclrReduction | LossVariant::PairOnly => 1,
            _ => config.batch.samples_per_caption,
        };
        if per_visit > manifest.min_samples_per_caption() {
            return Err(Error::Insufficient(format!(
                "batch needs {per_visit} samples per caption, manifest has {}",
                manifest.min_samples_per_caption()
            )));
        }
        let mut text_inputs = Vec::new();
        if config.uses_text() {
            if config.text_encoder.input_dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: config.text_encoder.input_dim,
                });
            }
            let generator = Generator::new(manifest.header().config.clone())?;
            for g in manifest.groups() {
                text_inputs.push(generator.caption_to_component(&g.prompt())?.mean);
            }
        }
        let plan = config.plan(n)?;
        let schedule = schedule_for(&config, plan.steps as f64 / config.epochs as f64);
        let optimizer = match optimizer {
            Some(o) => o,
            None => OptimizerState::new(encoder.param_count()),
        };
        let text_optimizer = match (&text_encoder, text_optimizer) {
            (Some(_), Some(o)) => Some(o),
            (Some(t), None) => Some(OptimizerState::new(t.param_count())),
            (None, _) => None,
        };
        if optimizer.m.len() != encoder.param_count() {
            return Err(Error::DimensionMismatch {
                expected: encoder.param_count(),
                got: optimizer.m.len(),
            });
        }
        Ok(Self {
            config_hash: config_hash(&config)?,
            dataset_hash: manifest.header().config_hash.clone(),
            stream: CaptionStream::new(n, config.seed),
            config,
            plan,
            schedule,
            encoder,
            text_encoder,
            optimizer,
            text_optimizer,
            step,
            text_inputs,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn plan(&self) -> &ForwardPlan {
        &self.plan
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn text_encoder(&self) -> Option<&Encoder> {
        self.text_encoder.as_ref()
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.steps
    }

    fn forwards_per_epoch(&self, num_captions: usize) -> f64 {
        self.config.total_forwards(num_captions) as f64 / self.config.epochs as f64
    }

    fn assemble(&mut self, manifest: &DatasetManifest, step: u64) -> Result<Assembled> {
        let seed = self.config.seed;
        let strength = self.config.augment_strength;
        let loss = self.config.loss;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut image_ids = Vec::new();
        let mut text_rows: Vec<Vec<f64>> = Vec::new();
        let mut text_ids: Vec<u64> = Vec::new();
        for v in self.plan.step_visits(step) {
            let group = self.stream.group_at(v);
            let size = self.plan.visit_size(v) as usize;
            let pick_seed = derive_seed(seed, &[stream::SAMPLE_PICK, v]);
            let view_seed = |j: usize| derive_seed(seed, &[stream::AUGMENT, v, j as u64]);
            match loss {
                LossVariant::MultiPositive | LossVariant::StablerepPlus => {
                    for (j, r) in pick_samples(manifest, group, size, pick_seed)?
                        .into_iter()
                        .enumerate()
                    {
                        let rec = manifest.record(r);
                        rows.push(augment(&rec.feature, strength, view_seed(j)));
                        image_ids.push(rec.caption_id);
                    }
                    let cid = manifest.groups()[group].caption_id;
                    if loss == LossVariant::StablerepPlus && !text_ids.contains(&cid) {
                        text_ids.push(cid);
                        text_rows.push(self.text_inputs[group].clone());
                    }
                }
                LossVariant::SimclrReduction => {
                    let r = pick_samples(manifest, group, 1, pick_seed)?[0];
                    let rec = manifest.record(r);
                    for j in 0..size {
                        rows.push(augment(&rec.feature, strength, view_seed(j)));
                        image_ids.push(v);
                    }
                }
                LossVariant::PairOnly => {
                    let r = pick_samples(manifest, group, 1, pick_seed)?[0];
                    let rec = manifest.record(r);
                    rows.push(augment(&rec.feature, strength, view_seed(0)));
                    image_ids.push(rec.caption_id);
                    text_ids.push(rec.caption_id);
                    text_rows.push(self.text_inputs[group].clone());
                }
            }
        }
        let to_matrix = |rows: &[Vec<f64>]| {
            let d = rows[0].len();
            Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rectangular rows")
        };
        Ok(Assembled {
            images: to_matrix(&rows),
            image_ids,
            texts: (!text_rows.is_empty()).then(|| (to_matrix(&text_rows), text_ids)),
        })
    }

    /// One optimizer step on the next batch of the plan.
    pub fn train_step(&mut self, manifest: &DatasetManifest) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::InvalidConfig(
                "training plan already finished".into(),
            ));
        }
        let step = self.step;
        let batch = self.assemble(manifest, step)?;
        let tau = self.config.temperature;
        let (img_out, img_cache) = self.encoder.forward(batch.images.view(), Mode::Train)?;
        let mut text_fwd: Option<(Array2<f64>, ForwardCache)> = None;
        if let (Some(te), Some((tx, _))) = (&self.text_encoder, &batch.texts) {
            let (o, c) = te.forward(tx.view(), Mode::Train)?;
            text_fwd = Some((o.projected, c));
        }
        let (loss, d_img, d_txt) = match self.config.loss {
            LossVariant::MultiPositive | LossVariant::SimclrReduction => {
                let out = multi_positive_loss(
                    img_out.projected.view(),
                    &batch.image_ids,
                    tau,
                    GradTarget::Normalized,
                )?;
                (out.loss, out.grad, None)
            }
            LossVariant::PairOnly => {
                let (t, _) = text_fwd.as_ref().expect("text batch");
                let out = pair_contrastive_loss(img_out.projected.view(), t.view(), tau)?;
                (out.sum(), out.grad_image, Some(out.grad_text))
            }
            LossVariant::StablerepPlus => {
                let (t, _) = text_fwd.as_ref().expect("text batch");
                let (_, ids) = batch.texts.as_ref().expect("text batch");
                let out = stablerep_plus_loss(
                    img_out.projected.view(),
                    &batch.image_ids,
                    t.view(),
                    ids,
                    tau,
                    self.config.text_pairing,
                )?;
                (out.total, out.grad_image, Some(out.grad_text))
            }
        };
        let mut g_img = self.encoder.backward(&img_cache, d_img.view())?;
        let mut g_txt = match (&self.text_encoder, &text_fwd, &d_txt) {
            (Some(te), Some((_, c)), Some(d)) => Some(te.backward(c, d.view())?),
            _ => None,
        };
        let sq: f64 = g_img
            .iter()
            .chain(g_txt.iter().flatten())
            .map(|g| g * g)
            .sum();
        let grad_norm = sq.sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                what: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        if let Some(max) = self.config.grad_clip {
            if grad_norm > max {
                let s = max / grad_norm;
                g_img
                    .iter_mut()
                    .chain(g_txt.iter_mut().flatten())
                    .for_each(|g| *g *= s);
            }
        }
        let lr = self.schedule.at(step);
        let opt = &self.config.optimizer;
        adamw_step(
            self.encoder.params_mut(),
            &g_img,
            &mut self.optimizer,
            lr,
            opt,
        )?;
        self.encoder.update_running_stats(&img_cache);
        if let (Some(te), Some(g), Some(st), Some((_, c))) = (
            self.text_encoder.as_mut(),
            g_txt.as_ref(),
            self.text_optimizer.as_mut(),
            text_fwd.as_ref(),
        ) {
            adamw_step(te.params_mut(), g, st, lr, opt)?;
            te.update_running_stats(c);
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            epoch_equiv: self.plan.forwards_through(step) as f64
                / self.forwards_per_epoch(manifest.num_captions()),
            loss,
            lr,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.config.clone(),
            self.config_hash.clone(),
            self.dataset_hash.clone(),
            self.step,
            self.plan.steps,
            EncoderState::of(&self.encoder),
            self.text_encoder.as_ref().map(EncoderState::of),
            self.optimizer.clone(),
            self.text_optimizer.clone(),
        )
    }

    /// Step until the plan is finished, handing each step's metrics to
    /// `on_step`.
    pub fn run<F>(&mut self, manifest: &DatasetManifest, mut on_step: F) -> Result<Vec<StepMetrics>>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        let mut all =
            Vec::with_capacity((self.plan.steps - self.step.min(self.plan.steps)) as usize);
        while !self.is_done() {
            let m = self.train_step(manifest)?;
            on_step(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsHeader {
    kind: String,
    config_hash: String,
    dataset_hash: String,
    total_steps: u64,
}

/// Line-delimited metrics: a header line, then one record per step.
pub struct MetricsLog {
    writer: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path, trainer: &Trainer) -> Result<Self> {
        let mut writer = BufWriter::new(File::create(path)?);
        write_json_line(
            &mut writer,
            &MetricsHeader {
                kind: "header".into(),
                config_hash: trainer.config_hash.clone(),
                dataset_hash: trainer.dataset_hash.clone(),
                total_steps: trainer.plan.steps,
            },
        )?;
        Ok(Self { writer })
    }

    /// Reopen a log for a resumed run, dropping records at or after
    /// `trainer.step()`.
    pub fn resume(path: &Path, trainer: &Trainer) -> Result<Self> {
        let kept: Vec<StepMetrics> = read_metrics(path)?
            .into_iter()
            .filter(|m| m.step < trainer.step())
            .collect();
        let mut log = Self::create(path, trainer)?;
        for m in &kept {
            log.append(m)?;
        }
        log.flush()?;
        let writer = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(Self { writer })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        write_json_line(&mut self.writer, m)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for (i, (line_no, line)) in read_lines(path)?.into_iter().enumerate() {
        if i == 0 {
            serde_json::from_str::<MetricsHeader>(&line)
                .map_err(|e| parse_error(path, line_no, e.to_string()))?;
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e.to_string()))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where to write `metrics.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Also keep `checkpoint-<step>.json` every this many steps.
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Train from scratch, or continue `resume` to the end of its plan.
pub fn run_training(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    resume: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => {
            if &ck.config != config {
                return Err(Error::InvalidConfig(
                    "resume config differs from the checkpoint's".into(),
                ));
            }
            Trainer::from_checkpoint(manifest, ck)?
        }
        None => Trainer::new(manifest, config.clone())?,
    };
    let mut log = match (&opts.out_dir, resume) {
        (Some(dir), Some(_)) => Some(MetricsLog::resume(&dir.join(METRICS_FILE), &trainer)?),
        (Some(dir), None) => Some(MetricsLog::create(&dir.join(METRICS_FILE), &trainer)?),
        (None, _) => None,
    };
    let metrics = trainer.run(manifest, |t, m| {
        if let Some(log) = log.as_mut() {
            log.append(m)?;
        }
        if let (Some(dir), Some(every)) = (&opts.out_dir, opts.checkpoint_every) {
            if every > 0 && t.step() % every == 0 && !t.is_done() {
                if let Some(log) = log.as_mut() {
                    log.flush()?;
                }
                t.checkpoint()
                    .write(&dir.join(format!("checkpoint-{:08}.json", t.step())))?;
            }
        }
        Ok(())
    })?;
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &opts.out_dir {
        checkpoint.write(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
    })
}
