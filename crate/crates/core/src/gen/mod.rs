//! Toy text-to-sample generator.
//!
//! Data for a caption `t` is `N(mu_t, sigma_c^2 I)` where `mu_t` is a class
//! center plus a caption-specific offset. The marginal over captions of one
//! class is again Gaussian with variance `sigma_c^2 + offset_scale^2`, so both
//! the conditional and the unconditional noise predictions have closed forms.
//! Sampling runs deterministic DDIM with classifier-free guidance.

mod manifest;
mod schedule;

pub use manifest::{CaptionGroup, DatasetManifest, ManifestHeader, SampleRecord};
pub use schedule::{DiffusionSchedule, NoiseLevel, ScheduleConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{derive_seed, rng_from, stream};
use crate::{Error, Result};

/// Identity of a text prompt: the unit that groups positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub caption_id: u64,
    pub class_id: usize,
    pub prompt_seed: u64,
}

impl PromptSpec {
    /// Derive the prompt seed and class from the caption text.
    pub fn from_text(caption_id: u64, text: &str, num_classes: usize) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        let prompt_seed = u64::from_le_bytes(head);
        let class_id = (derive_seed(prompt_seed, &[stream::CLASS_CENTER])
            % num_classes.max(1) as u64) as usize;
        Self {
            caption_id,
            class_id,
            prompt_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub class_center_scale: f64,
    pub caption_offset_scale: f64,
    /// Standard deviation of `p(x | t)`.
    pub conditional_std: f64,
    /// Guidance scale `w` used when `guidance_mix` is empty.
    pub guidance_scale: f64,
    /// When non-empty, each sample draws its scale uniformly from this set.
    pub guidance_mix: Vec<f64>,
    pub ddim_steps: usize,
    pub schedule: ScheduleConfig,
    /// Seed of the class-center draws.
    pub world_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_classes: 10,
            class_center_scale: 0.6,
            caption_offset_scale: 1.0,
            conditional_std: 0.5,
            guidance_scale: 2.0,
            guidance_mix: Vec::new(),
            ddim_steps: 50,
            schedule: ScheduleConfig::default(),
            world_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.feature_dim < 2 {
            return bad("feature_dim must be >= 2");
        }
        if self.num_classes < 1 {
            return bad("num_classes must be >= 1");
        }
        for (name, v) in [
            ("class_center_scale", self.class_center_scale),
            ("caption_offset_scale", self.caption_offset_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.conditional_std.is_finite() && self.conditional_std >= 0.0) {
            return bad("conditional_std must be finite and >= 0");
        }
        if self
            .guidance_mix
            .iter()
            .chain(std::iter::once(&self.guidance_scale))
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return bad("guidance scales must be finite and >= 0");
        }
        if self.ddim_steps < 1 {
            return bad("ddim_steps must be >= 1");
        }
        Ok(())
    }
}

/// Mean of a caption's conditional distribution together with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: Vec<f64>,
    pub class_id: usize,
}

/// One generated feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub caption_id: u64,
    pub class_id: usize,
    pub feature: Vec<f64>,
    pub latent_seed: u64,
    pub guidance_scale: f64,
}

/// Validated generator with its class centers and schedule precomputed.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    centers: Vec<Vec<f64>>,
    schedule: DiffusionSchedule,
}

fn standard_normal_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = DiffusionSchedule::cosine(cfg.ddim_steps, &cfg.schedule)?;
        Self::with_schedule(cfg, schedule)
    }

    /// Use an explicit schedule instead of the configured cosine one.
    pub fn with_schedule(cfg: GeneratorConfig, schedule: DiffusionSchedule) -> Result<Self> {
        cfg.validate()?;
        let centers = (0..cfg.num_classes)
            .map(|k| {
                let mut rng = rng_from(cfg.world_seed, &[stream::CLASS_CENTER, k as u64]);
                standard_normal_vec(&mut rng, cfg.feature_dim, cfg.class_center_scale)
            })
            .collect();
        Ok(Self {
            cfg,
            centers,
            schedule,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn class_center(&self, class_id: usize) -> &[f64] {
        &self.centers[class_id]
    }

    pub fn prompt(&self, caption_id: u64, text: &str) -> PromptSpec {
        PromptSpec::from_text(caption_id, text, self.cfg.num_classes)
    }

    /// Variance of each class-level mixture component.
    pub fn marginal_variance(&self) -> f64 {
        let s = self.cfg.conditional_std;
        let o = self.cfg.caption_offset_scale;
        s * s + o * o
    }

    /// `mean = class_center(class_id) + caption_offset(prompt)`.
    pub fn caption_to_component(&self, prompt: &PromptSpec) -> Result<Component> {
        let center = self.centers.get(prompt.class_id).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "class {} outside [0, {})",
                prompt.class_id, self.cfg.num_classes
            ))
        })?;
        let mut rng = rng_from(prompt.prompt_seed, &[stream::CAPTION_OFFSET]);
        let offset = standard_normal_vec(
            &mut rng,
            self.cfg.feature_dim,
            self.cfg.caption_offset_scale,
        );
        let mean = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
        Ok(Component {
            mean,
            class_id: prompt.class_id,
        })
    }

    fn noise_level(&self, index: usize) -> Result<NoiseLevel> {
        let level = self.schedule.level(index)?;
        if level.sigma == 0.0 {
            return Err(Error::ZeroNoiseLevel { index });
        }
        Ok(level)
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.cfg.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.feature_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Exact noise prediction for the caption's Gaussian `N(mu_t, sigma_c^2 I)`.
    pub fn epsilon_cond(&self, z: &[f64], level: usize, prompt: &PromptSpec) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let lvl = self.noise_level(level)?;
        let comp = self.caption_to_component(prompt)?;
        let var = self.cfg.conditional_std.powi(2);
        Ok(gaussian_epsilon(z, &comp.mean, var, lvl))
    }

    /// Exact noise prediction for the equal-weight class mixture.
    pub fn epsilon_uncond(&self, z: &[f64], level: usize) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let lvl = self.noise_level(level)?;
        Ok(mixture_epsilon(
            z,
            &self.centers,
            self.marginal_variance(),
            lvl,
        ))
    }

    /// `w * eps_cond + (1 - w) * eps_uncond`.
    pub fn cfg_epsilon(
        &self,
        z: &[f64],
        level: usize,
        prompt: &PromptSpec,
        w: f64,
    ) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let lvl = self.noise_level(level)?;
        let comp = self.caption_to_component(prompt)?;
        Ok(self.guided(z, &comp.mean, lvl, w))
    }

    fn guided(&self, z: &[f64], mean: &[f64], lvl: NoiseLevel, w: f64) -> Vec<f64> {
        let cond = gaussian_epsilon(z, mean, self.cfg.conditional_std.powi(2), lvl);
        let uncond = mixture_epsilon(z, &self.centers, self.marginal_variance(), lvl);
        combine_guidance(&cond, &uncond, w)
    }

    /// Deterministic DDIM sample at the configured guidance scale.
    pub fn ddim_sample(&self, prompt: &PromptSpec, latent_seed: u64) -> Result<SyntheticSample> {
        self.ddim_sample_with_scale(prompt, latent_seed, self.cfg.guidance_scale)
    }

    pub fn ddim_sample_with_scale(
        &self,
        prompt: &PromptSpec,
        latent_seed: u64,
        w: f64,
    ) -> Result<SyntheticSample> {
        let comp = self.caption_to_component(prompt)?;
        let dim = self.cfg.feature_dim;
        let mut rng = rng_from(latent_seed, &[stream::LATENT]);
        let mut z = standard_normal_vec(&mut rng, dim, 1.0);
        let levels = self.schedule.levels();
        let mut x_hat = vec![0.0; dim];
        for (i, lvl) in levels.iter().enumerate() {
            if lvl.sigma == 0.0 {
                return Err(Error::ZeroNoiseLevel { index: i });
            }
            let eps = self.guided(&z, &comp.mean, *lvl, w);
            for k in 0..dim {
                x_hat[k] = (z[k] - lvl.sigma * eps[k]) / lvl.alpha;
            }
            if x_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: i,
                    what: "DDIM state".into(),
                });
            }
            if let Some(next) = levels.get(i + 1) {
                for k in 0..dim {
                    z[k] = next.alpha * x_hat[k] + next.sigma * eps[k];
                }
            }
        }
        Ok(SyntheticSample {
            caption_id: prompt.caption_id,
            class_id: prompt.class_id,
            feature: x_hat,
            latent_seed,
            guidance_scale: w,
        })
    }
}

/// Guidance scale used for one sample: the configured scale, or a uniform
/// pick from the mix.
pub fn pick_guidance(cfg: &GeneratorConfig, sample_seed: u64) -> f64 {
    if cfg.guidance_mix.is_empty() {
        cfg.guidance_scale
    } else {
        let mut rng = rng_from(sample_seed, &[stream::GUIDANCE_PICK]);
        cfg.guidance_mix[rng.random_range(0..cfg.guidance_mix.len())]
    }
}

pub fn combine_guidance(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| w * c + (1.0 - w) * u)
        .collect()
}

/// Posterior-mean noise prediction for data `N(mean, var I)` observed through
/// `z = alpha x + sigma eps`.
pub fn gaussian_epsilon(z: &[f64], mean: &[f64], var: f64, lvl: NoiseLevel) -> Vec<f64> {
    let NoiseLevel { alpha, sigma } = lvl;
    let gain = alpha * var / (alpha * alpha * var + sigma * sigma);
    z.iter()
        .zip(mean)
        .map(|(&zk, &mk)| {
            let post = mk + gain * (zk - alpha * mk);
            (zk - alpha * post) / sigma
        })
        .collect()
}

/// Noise prediction for an equal-weight mixture of `N(c_k, var I)`.
pub fn mixture_epsilon(z: &[f64], centers: &[Vec<f64>], var: f64, lvl: NoiseLevel) -> Vec<f64> {
    let NoiseLevel { alpha, sigma } = lvl;
    let noisy_var = alpha * alpha * var + sigma * sigma;
    let log_w: Vec<f64> = centers
        .iter()
        .map(|c| {
            let d2: f64 = z
                .iter()
                .zip(c)
                .map(|(zk, ck)| (zk - alpha * ck).powi(2))
                .sum();
            -0.5 * d2 / noisy_var
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let gain = alpha * var / noisy_var;
    let mut post = vec![0.0; z.len()];
    for (c, wk) in centers.iter().zip(&weights) {
        let r = wk / total;
        for k in 0..z.len() {
            post[k] += r * (c[k] + gain * (z[k] - alpha * c[k]));
        }
    }
    z.iter()
        .zip(&post)
        .map(|(zk, pk)| (zk - alpha * pk) / sigma)
        .collect()
}

/// Generate `images_per_caption` samples per caption.
///
/// Latent seeds are derived from `(seed, caption_id, j)`, so the result is a
/// pure function of the inputs regardless of thread count.
pub fn generate_dataset(
    generator: &Generator,
    captions: &[PromptSpec],
    images_per_caption: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if images_per_caption == 0 {
        return Err(Error::InvalidConfig(
            "images_per_caption must be >= 1".into(),
        ));
    }
    if captions.is_empty() {
        return Err(Error::InvalidConfig("caption list is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = captions.iter().find(|p| !seen.insert(p.caption_id)) {
        return Err(Error::InvalidConfig(format!(
            "caption id {} appears twice",
            dup.caption_id
        )));
    }
    let groups: Vec<Vec<SyntheticSample>> = captions
        .par_iter()
        .map(|prompt| {
            (0..images_per_caption as u64)
                .map(|j| {
                    let latent_seed = derive_seed(seed, &[stream::LATENT, prompt.caption_id, j]);
                    let w = pick_guidance(generator.config(), latent_seed);
                    generator.ddim_sample_with_scale(prompt, latent_seed, w)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let records = captions
        .iter()
        .zip(groups)
        .flat_map(|(prompt, samples)| samples.into_iter().map(move |s| (prompt.prompt_seed, s)))
        .enumerate()
        .map(|(sample_id, (prompt_seed, s))| SampleRecord {
            sample_id: sample_id as u64,
            caption_id: s.caption_id,
            class_id: s.class_id,
            prompt_seed,
            latent_seed: s.latent_seed,
            guidance_scale: s.guidance_scale,
            feature: s.feature,
        })
        .collect();
    DatasetManifest::new(
        generator.config().clone(),
        seed,
        images_per_caption,
        records,
    )
}

#[cfg(test)]
mod tests;
