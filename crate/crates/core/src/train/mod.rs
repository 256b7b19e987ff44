//! Training loop: AdamW with warmup + cosine learning rate, SimCLR-equivalent
//! epoch accounting, metrics logging and checkpoints.

mod checkpoint;
mod optim;
mod plan;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::data::BatchSpec;
use crate::model::EncoderConfig;
use crate::objective::{Temperature, TextPairing};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, EncoderState, CHECKPOINT_FORMAT};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use plan::ForwardPlan;
pub use schedule::{peak_lr, LrSchedule, REFERENCE_BATCH};
pub use trainer::{
    lr_at, read_metrics, run_training, MetricsLog, RunOptions, StepMetrics, TrainOutcome, Trainer,
    CHECKPOINT_FILE, METRICS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// All `m` samples of a caption are positives for each other.
    #[default]
    MultiPositive,
    /// One sample per caption, two augmented views (`m` must be 2).
    SimclrReduction,
    /// Image/text pair contrast only, one sample per caption (`m` must be 1).
    PairOnly,
    /// Multi-positive plus half the image/text pair terms.
    StablerepPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: BatchSpec,
    /// Learning rate for a 512-forward batch; scaled linearly.
    pub base_lr: f64,
    pub optimizer: AdamWConfig,
    /// SimCLR-equivalent epochs: `epochs × 2 × num_captions` sample forwards.
    pub epochs: u64,
    pub warmup_epochs: f64,
    pub temperature: Temperature,
    pub seed: u64,
    pub loss: LossVariant,
    pub augment_strength: f64,
    pub text_pairing: TextPairing,
    /// Rescale the gradient when its norm exceeds this value.
    pub grad_clip: Option<f64>,
    pub encoder: EncoderConfig,
    /// Used by the losses with a language term.
    pub text_encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: BatchSpec::default(),
            base_lr: 1e-2,
            optimizer: AdamWConfig::default(),
            epochs: 20,
            warmup_epochs: 1.0,
            temperature: Temperature::new(0.1).expect("valid"),
            seed: 0,
            loss: LossVariant::MultiPositive,
            augment_strength: 0.1,
            text_pairing: TextPairing::PerImage,
            grad_clip: None,
            encoder: EncoderConfig::default(),
            text_encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.batch.validate()?;
        self.optimizer.validate()?;
        self.encoder.validate()?;
        if self.uses_text() {
            self.text_encoder.validate()?;
            if self.text_encoder.projection_dim != self.encoder.projection_dim {
                return bad("text and image projection dims differ".into());
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!(
                "warmup_epochs must be in [0, epochs), got {}",
                self.warmup_epochs
            ));
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength < 1.0) {
            return bad("augment_strength must be in [0, 1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        let m = self.batch.samples_per_caption;
        match self.loss {
            LossVariant::MultiPositive | LossVariant::StablerepPlus if m < 2 => {
                bad("multi-positive losses need m >= 2".into())
            }
            LossVariant::SimclrReduction if m != 2 => {
                bad("simclr_reduction uses two views per caption (m = 2)".into())
            }
            LossVariant::PairOnly if m != 1 => {
                bad("pair_only uses one sample per caption (m = 1)".into())
            }
            _ => Ok(()),
        }
    }

    pub fn uses_text(&self) -> bool {
        matches!(
            self.loss,
            LossVariant::PairOnly | LossVariant::StablerepPlus
        )
    }

    /// Sample forwards for the whole run over `num_captions` captions.
    /// Pair-only training counts one pass per epoch.
    pub fn total_forwards(&self, num_captions: usize) -> u64 {
        let per_epoch = match self.loss {
            LossVariant::PairOnly => num_captions as u64,
            _ => 2 * num_captions as u64,
        };
        self.epochs * per_epoch
    }

    pub fn plan(&self, num_captions: usize) -> Result<ForwardPlan> {
        ForwardPlan::new(
            self.total_forwards(num_captions),
            self.batch.samples_per_caption as u64,
            self.batch.num_captions as u64,
        )
    }

    pub fn peak_lr(&self) -> f64 {
        peak_lr(self.base_lr, self.batch.total())
    }
}
