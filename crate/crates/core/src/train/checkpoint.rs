use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::io::exact_f64s;
use crate::model::{Encoder, EncoderConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "stablerep-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    #[serde(with = "exact_f64s")]
    pub params: Vec<f64>,
    #[serde(with = "exact_f64s")]
    pub buffers: Vec<f64>,
}

impl EncoderState {
    pub fn of(encoder: &Encoder) -> Self {
        Self {
            params: encoder.params().to_vec(),
            buffers: encoder.buffers().to_vec(),
        }
    }

    pub fn restore(&self, config: &EncoderConfig) -> Result<Encoder> {
        Encoder::from_parts(config.clone(), self.params.clone(), self.buffers.clone())
    }
}

/// Position of the deterministic data stream: every draw is derived from
/// `seed` and the step counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the training manifest header.
    pub dataset_hash: String,
    pub step: u64,
    pub total_steps: u64,
    pub encoder: EncoderState,
    pub text_encoder: Option<EncoderState>,
    pub optimizer: OptimizerState,
    pub text_optimizer: Option<OptimizerState>,
    pub rng: RngState,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        config: TrainConfig,
        config_hash: String,
        dataset_hash: String,
        step: u64,
        total_steps: u64,
        encoder: EncoderState,
        text_encoder: Option<EncoderState>,
        optimizer: OptimizerState,
        text_optimizer: Option<OptimizerState>,
    ) -> Self {
        let seed = config.seed;
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            config_hash,
            dataset_hash,
            step,
            total_steps,
            encoder,
            text_encoder,
            optimizer,
            text_optimizer,
            rng: RngState {
                seed,
                next_step: step,
            },
        }
    }

    pub fn is_complete(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn encoder(&self) -> Result<Encoder> {
        self.encoder.restore(&self.config.encoder)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::UnknownFormat(ck.format));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::UnknownFormat(format!(
                "{} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
