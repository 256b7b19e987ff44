use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stablerep::eval::{EpisodeSpec, FeatureSpace, ProbeConfig};
use stablerep::gen::GeneratorConfig;
use stablerep::io::config_hash;
use stablerep::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Environment variable that sets the master seed when `--seed` is absent.
pub const SEED_ENV: &str = "STABLEREP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_captions: usize,
    pub images_per_caption: usize,
    /// One caption per line; synthetic captions are used when absent.
    pub captions_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_captions: 500,
            images_per_caption: 10,
            captions_file: None,
        }
    }
}

/// Held-out evaluation data and protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_captions: usize,
    pub images_per_caption: usize,
    /// Guidance used to sample evaluation data; 1 is the plain conditional.
    pub guidance_scale: f64,
    /// Fraction of evaluation captions whose samples form the probe test set.
    pub test_fraction: f64,
    pub space: FeatureSpace,
    pub probe: ProbeConfig,
    pub fewshot: EpisodeSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_captions: 500,
            images_per_caption: 4,
            guidance_scale: 1.0,
            test_fraction: 0.5,
            space: FeatureSpace::Representation,
            probe: ProbeConfig::default(),
            fewshot: EpisodeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(flatten)
    }

    /// Config file (or defaults), then `key=value` overrides, then the seed.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> CliResult<Self> {
        let config_err = |msg: String| CliError::Config {
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            msg,
        };
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(e.to_string()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(flatten(e)))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o).map_err(CliError::Usage)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(flatten(e)))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self)
            .map_err(|e| CliError::Usage(format!("config does not serialize: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.generator.validate()?;
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.data.num_captions == 0 && self.data.captions_file.is_none() {
            return bad("data.num_captions must be >= 1");
        }
        if self.data.images_per_caption == 0 || self.eval.images_per_caption == 0 {
            return bad("images_per_caption must be >= 1");
        }
        if self.eval.num_captions < 2 {
            return bad("eval.num_captions must be >= 2");
        }
        if !(self.eval.test_fraction > 0.0 && self.eval.test_fraction < 1.0) {
            return bad("eval.test_fraction must be in (0, 1)");
        }
        if !(self.eval.guidance_scale >= 0.0 && self.eval.guidance_scale.is_finite()) {
            return bad("eval.guidance_scale must be finite and >= 0");
        }
        self.eval.probe.validate()?;
        self.eval.fewshot.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> CliResult<String> {
        Ok(config_hash(self)?)
    }
}

fn flatten(e: impl std::fmt::Display) -> String {
    e.to_string().trim().replace('\n', " ")
}

/// Set a dotted key such as `train.batch.num_captions=8`. The value is read
/// as a TOML value and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key {key:?} is malformed"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        node = match node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(format!("override key {key:?}: {p} is not a table")),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
