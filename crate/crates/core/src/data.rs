//! Captions, generation budgets, feature-space augmentation and batch
//! sampling.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use num_rational::Ratio;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gen::{DatasetManifest, PromptSpec};
use crate::io::read_lines;
use crate::rng::{derive_seed, rng_from, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub caption_id: u64,
    pub text: String,
    pub prompt: PromptSpec,
}

impl CaptionRecord {
    pub fn new(caption_id: u64, text: impl Into<String>, num_classes: usize) -> Self {
        let text = text.into();
        let prompt = PromptSpec::from_text(caption_id, &text, num_classes);
        Self {
            caption_id,
            text,
            prompt,
        }
    }
}

/// Lowercase and collapse runs of whitespace.
pub fn normalize_caption(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Keep the first occurrence of each normalized caption, preserving order.
pub fn dedup_captions(records: Vec<CaptionRecord>) -> Vec<CaptionRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(normalize_caption(&r.text)))
        .collect()
}

/// One caption per line; the 0-based line number is the caption id.
/// Blank lines are skipped but still consume an id.
pub fn read_captions(path: &Path, num_classes: usize) -> Result<Vec<CaptionRecord>> {
    Ok(read_lines(path)?
        .into_iter()
        .map(|(line_no, text)| CaptionRecord::new((line_no - 1) as u64, text.trim(), num_classes))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationBudget {
    pub total_images: u64,
    pub images_per_caption: u64,
    pub num_captions: u64,
}

/// Spend a budget of `total` images as `total / per_caption` captions.
pub fn split_budget(total: u64, per_caption: u64) -> Result<GenerationBudget> {
    if total == 0 || per_caption == 0 {
        return Err(Error::InvalidConfig(
            "budget and images per caption must be positive".into(),
        ));
    }
    if !total.is_multiple_of(per_caption) {
        return Err(Error::BudgetNotDivisible { total, per_caption });
    }
    Ok(GenerationBudget {
        total_images: total,
        images_per_caption: per_caption,
        num_captions: total / per_caption,
    })
}

/// Additive Gaussian noise followed by a random scaling in
/// `[1 - strength, 1 + strength]`. `strength == 0` is the identity.
pub fn augment(feature: &[f64], strength: f64, seed: u64) -> Vec<f64> {
    if strength == 0.0 {
        return feature.to_vec();
    }
    let mut rng = rng_from(seed, &[stream::AUGMENT]);
    let noise: Vec<f64> = (0..feature.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let scale = 1.0 + strength * (2.0 * rng.random::<f64>() - 1.0);
    feature
        .iter()
        .zip(noise)
        .map(|(x, g)| (x + strength * g) * scale)
        .collect()
}

/// `n` captions with `m` samples each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub num_captions: usize,
    pub samples_per_caption: usize,
}

impl Default for BatchSpec {
    /// 96 forwards: 16 captions with 6 samples each.
    fn default() -> Self {
        Self {
            num_captions: 16,
            samples_per_caption: 6,
        }
    }
}

impl BatchSpec {
    pub fn new(num_captions: usize, samples_per_caption: usize) -> Result<Self> {
        let spec = Self {
            num_captions,
            samples_per_caption,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_captions < 2 {
            return Err(Error::InvalidConfig(
                "batch needs at least 2 captions".into(),
            ));
        }
        if self.samples_per_caption < 1 {
            return Err(Error::InvalidConfig(
                "samples per caption must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_captions * self.samples_per_caption
    }
}

/// Caption-major batch of features.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub caption_ids: Vec<u64>,
    /// Manifest row of each sample.
    pub sample_indices: Vec<usize>,
}

impl Batch {
    /// Copy the listed manifest rows verbatim.
    pub fn from_indices(manifest: &DatasetManifest, sample_indices: Vec<usize>) -> Self {
        let dim = manifest.feature_dim();
        let mut features = Array2::zeros((sample_indices.len(), dim));
        let mut caption_ids = Vec::with_capacity(sample_indices.len());
        for (row, &i) in sample_indices.iter().enumerate() {
            let rec = manifest.record(i);
            features
                .row_mut(row)
                .iter_mut()
                .zip(&rec.feature)
                .for_each(|(d, s)| *d = *s);
            caption_ids.push(rec.caption_id);
        }
        Self {
            features,
            caption_ids,
            sample_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.caption_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caption_ids.is_empty()
    }
}

/// `m` distinct sample rows of manifest caption group `group`.
pub fn pick_samples(
    manifest: &DatasetManifest,
    group: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let g = &manifest.groups()[group];
    let l = g.sample_indices.len();
    if m > l {
        return Err(Error::Insufficient(format!(
            "caption {} has {l} samples, {m} requested",
            g.caption_id
        )));
    }
    let mut rng = rng_from(seed, &[stream::SAMPLE_PICK]);
    Ok(index::sample(&mut rng, l, m)
        .into_iter()
        .map(|j| g.sample_indices[j])
        .collect())
}

/// Draw `n` captions without replacement and `m` of each caption's samples
/// without replacement.
pub fn sample_batch(manifest: &DatasetManifest, spec: &BatchSpec, seed: u64) -> Result<Batch> {
    spec.validate()?;
    let n = spec.num_captions;
    let m = spec.samples_per_caption;
    if n > manifest.num_captions() {
        return Err(Error::Insufficient(format!(
            "batch needs {n} captions, manifest has {}",
            manifest.num_captions()
        )));
    }
    if m > manifest.min_samples_per_caption() {
        return Err(Error::Insufficient(format!(
            "batch needs {m} samples per caption, manifest has {}",
            manifest.min_samples_per_caption()
        )));
    }
    let mut rng = rng_from(seed, &[stream::BATCH]);
    let groups = index::sample(&mut rng, manifest.num_captions(), n);
    let mut rows = Vec::with_capacity(n * m);
    for (slot, g) in groups.into_iter().enumerate() {
        rows.extend(pick_samples(
            manifest,
            g,
            m,
            derive_seed(seed, &[slot as u64]),
        )?);
    }
    Ok(Batch::from_indices(manifest, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches_per_epoch: u64,
    /// One pass over the captions costs this many SimCLR epochs (`m / 2`).
    pub simclr_equivalent_factor: Ratio<u64>,
}

pub fn epoch_plan(num_captions: u64, spec: &BatchSpec) -> Result<EpochPlan> {
    spec.validate()?;
    Ok(EpochPlan {
        batches_per_epoch: num_captions.div_ceil(spec.num_captions as u64),
        simclr_equivalent_factor: Ratio::new(spec.samples_per_caption as u64, 2),
    })
}

/// Endless stream of caption visits: each epoch is a fresh seeded
/// permutation of the manifest's caption groups.
#[derive(Debug, Clone)]
pub struct CaptionStream {
    num_captions: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl CaptionStream {
    pub fn new(num_captions: usize, seed: u64) -> Self {
        Self {
            num_captions,
            seed,
            cached_epoch: None,
        }
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = rng_from(self.seed, &[stream::EPOCH_PERMUTATION, epoch]);
        index::sample(&mut rng, self.num_captions, self.num_captions).into_vec()
    }

    /// Caption group visited at global position `visit`.
    pub fn group_at(&mut self, visit: u64) -> usize {
        let n = self.num_captions as u64;
        let epoch = visit / n;
        let pos = (visit % n) as usize;
        match &self.cached_epoch {
            Some((e, perm)) if *e == epoch => perm[pos],
            _ => {
                let perm = self.permutation(epoch);
                let g = perm[pos];
                self.cached_epoch = Some((epoch, perm));
                g
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_dataset, Generator, GeneratorConfig};
    use proptest::prelude::*;

    fn recs(texts: &[&str]) -> Vec<CaptionRecord> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| CaptionRecord::new(i as u64, *t, 10))
            .collect()
    }

    fn texts(r: &[CaptionRecord]) -> Vec<&str> {
        r.iter().map(|c| c.text.as_str()).collect()
    }

    fn manifest(captions: u64, l: usize) -> DatasetManifest {
        let g = Generator::new(GeneratorConfig {
            ddim_steps: 5,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let prompts: Vec<_> = (0..captions)
            .map(|i| g.prompt(i, &format!("c{i}")))
            .collect();
        generate_dataset(&g, &prompts, l, 3).unwrap()
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let out = dedup_captions(recs(&["a dog", "a cat", "a dog"]));
        assert_eq!(texts(&out), ["a dog", "a cat"]);
        assert_eq!(out[1].caption_id, 1);
        let uniq = recs(&["x", "y", "z"]);
        assert_eq!(dedup_captions(uniq.clone()), uniq);
        assert_eq!(dedup_captions(recs(&["A  dog", "a dog"])).len(), 1);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(words in proptest::collection::vec("[aAbB ]{0,6}", 0..20)) {
            let r: Vec<CaptionRecord> = words
                .iter()
                .enumerate()
                .map(|(i, t)| CaptionRecord::new(i as u64, t.clone(), 3))
                .collect();
            let once = dedup_captions(r);
            prop_assert_eq!(dedup_captions(once.clone()), once);
        }
    }

    #[test]
    fn caption_file_line_numbers_are_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.txt");
        std::fs::write(&path, "a dog\n\nA  Dog\na cat\n").unwrap();
        let r = read_captions(&path, 10).unwrap();
        assert_eq!(
            r.iter().map(|c| c.caption_id).collect::<Vec<_>>(),
            [0, 2, 3]
        );
        let d = dedup_captions(r);
        assert_eq!(d.iter().map(|c| c.caption_id).collect::<Vec<_>>(), [0, 3]);
    }

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(2_700_000, 10).unwrap().num_captions, 270_000);
        assert_eq!(split_budget(100, 1).unwrap().num_captions, 100);
        assert!(matches!(
            split_budget(100, 3),
            Err(Error::BudgetNotDivisible { .. })
        ));
        assert!(split_budget(0, 1).is_err());
    }

    #[test]
    fn augment_identity_and_determinism() {
        let x = [0.5, -1.0, 2.0];
        assert_eq!(augment(&x, 0.0, 9), x.to_vec());
        assert_eq!(augment(&x, 0.3, 9), augment(&x, 0.3, 9));
        assert_ne!(augment(&x, 0.3, 9), augment(&x, 0.3, 10));
    }

    #[test]
    fn batch_shape_and_grouping() {
        let m = manifest(6, 4);
        let spec = BatchSpec::new(2, 3).unwrap();
        let b = sample_batch(&m, &spec, 1).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.features.dim(), (6, 32));
        assert_eq!(b.caption_ids[0], b.caption_ids[2]);
        assert_eq!(b.caption_ids[3], b.caption_ids[5]);
        assert_ne!(b.caption_ids[0], b.caption_ids[3]);
        assert_eq!(b, sample_batch(&m, &spec, 1).unwrap());
        for (row, &i) in b.sample_indices.iter().enumerate() {
            let rec = m.record(i);
            assert_eq!(rec.caption_id, b.caption_ids[row]);
            assert!(b
                .features
                .row(row)
                .iter()
                .zip(&rec.feature)
                .all(|(a, c)| a.to_bits() == c.to_bits()));
        }
    }

    #[test]
    fn full_groups_when_m_equals_l() {
        let m = manifest(5, 3);
        let b = sample_batch(&m, &BatchSpec::new(5, 3).unwrap(), 2).unwrap();
        let mut rows = b.sample_indices.clone();
        rows.sort_unstable();
        assert_eq!(rows, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn batch_errors_when_oversubscribed() {
        let m = manifest(3, 2);
        assert!(sample_batch(&m, &BatchSpec::new(4, 1).unwrap(), 0).is_err());
        assert!(sample_batch(&m, &BatchSpec::new(2, 3).unwrap(), 0).is_err());
        assert!(BatchSpec::new(1, 2).is_err());
    }

    #[test]
    fn epoch_plan_arithmetic() {
        let p = epoch_plan(1000, &BatchSpec::new(100, 6).unwrap()).unwrap();
        assert_eq!(p.batches_per_epoch, 10);
        assert_eq!(p.simclr_equivalent_factor, Ratio::from_integer(3));
        let p = epoch_plan(1001, &BatchSpec::new(100, 2).unwrap()).unwrap();
        assert_eq!(p.batches_per_epoch, 11);
        assert_eq!(p.simclr_equivalent_factor, Ratio::from_integer(1));
    }

    #[test]
    fn caption_stream_covers_each_epoch_once() {
        let mut s = CaptionStream::new(7, 5);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|p| s.group_at(epoch * 7 + p)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        assert_ne!(s.permutation(0), s.permutation(1));
    }
}
