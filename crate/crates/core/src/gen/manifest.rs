use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{GeneratorConfig, PromptSpec};
use crate::io::{
    config_hash, create_writer, fixed_array, parse_error, read_lines, write_json_line,
};
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "stablerep-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub config: GeneratorConfig,
    pub master_seed: u64,
    pub images_per_caption: usize,
    pub num_captions: usize,
    pub num_samples: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub caption_id: u64,
    pub class_id: usize,
    pub prompt_seed: u64,
    pub latent_seed: u64,
    pub guidance_scale: f64,
    pub feature: Vec<f64>,
}

impl SampleRecord {
    pub fn prompt(&self) -> PromptSpec {
        PromptSpec {
            caption_id: self.caption_id,
            class_id: self.class_id,
            prompt_seed: self.prompt_seed,
        }
    }
}

#[derive(Serialize)]
struct SampleLineOut<'a> {
    kind: &'static str,
    sample_id: u64,
    caption_id: u64,
    class_id: usize,
    prompt_seed: u64,
    latent_seed: u64,
    guidance_scale: f64,
    feature: &'a RawValue,
}

#[derive(Serialize)]
struct HeaderLineOut<'a> {
    kind: &'static str,
    #[serde(flatten)]
    header: &'a ManifestHeader,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Sample {
        sample_id: u64,
        caption_id: u64,
        class_id: usize,
        prompt_seed: u64,
        latent_seed: u64,
        guidance_scale: f64,
        feature: Vec<f64>,
    },
}

/// Samples of one caption, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionGroup {
    pub caption_id: u64,
    pub class_id: usize,
    pub prompt_seed: u64,
    pub sample_indices: Vec<usize>,
}

impl CaptionGroup {
    pub fn prompt(&self) -> PromptSpec {
        PromptSpec {
            caption_id: self.caption_id,
            class_id: self.class_id,
            prompt_seed: self.prompt_seed,
        }
    }
}

/// An immutable generated dataset: header plus caption-major sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    header: ManifestHeader,
    records: Vec<SampleRecord>,
    groups: Vec<CaptionGroup>,
}

#[derive(Serialize)]
struct HashInput<'a> {
    config: &'a GeneratorConfig,
    master_seed: u64,
    images_per_caption: usize,
}

impl DatasetManifest {
    pub fn new(
        config: GeneratorConfig,
        master_seed: u64,
        images_per_caption: usize,
        records: Vec<SampleRecord>,
    ) -> Result<Self> {
        let hash = config_hash(&HashInput {
            config: &config,
            master_seed,
            images_per_caption,
        })?;
        let groups = build_groups(&records)?;
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            num_captions: groups.len(),
            num_samples: records.len(),
            config,
            master_seed,
            images_per_caption,
            config_hash: hash,
        };
        Ok(Self {
            header,
            records,
            groups,
        })
    }

    pub fn header(&self) -> &ManifestHeader {
        &self.header
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &SampleRecord {
        &self.records[index]
    }

    pub fn groups(&self) -> &[CaptionGroup] {
        &self.groups
    }

    pub fn num_captions(&self) -> usize {
        self.groups.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.header.config.feature_dim
    }

    /// Smallest number of samples any caption has.
    pub fn min_samples_per_caption(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.sample_indices.len())
            .min()
            .unwrap_or(0)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_json_line(
            w,
            &HeaderLineOut {
                kind: "header",
                header: &self.header,
            },
        )?;
        for r in &self.records {
            let feature = fixed_array(&r.feature)?;
            write_json_line(
                w,
                &SampleLineOut {
                    kind: "sample",
                    sample_id: r.sample_id,
                    caption_id: r.caption_id,
                    class_id: r.class_id,
                    prompt_seed: r.prompt_seed,
                    latent_seed: r.latent_seed,
                    guidance_scale: r.guidance_scale,
                    feature: &feature,
                },
            )?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create_writer(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let mut iter = lines.into_iter();
        let (first_no, first) = iter
            .next()
            .ok_or_else(|| parse_error(path, 1, "empty manifest"))?;
        let header = match serde_json::from_str::<ManifestLine>(&first)
            .map_err(|e| parse_error(path, first_no, e.to_string()))?
        {
            ManifestLine::Header(h) => h,
            ManifestLine::Sample { .. } => {
                return Err(parse_error(
                    path,
                    first_no,
                    "first record must be the header",
                ))
            }
        };
        if header.format != MANIFEST_FORMAT {
            return Err(parse_error(path, first_no, "not a manifest file"));
        }
        let mut records = Vec::with_capacity(header.num_samples);
        for (no, line) in iter {
            match serde_json::from_str::<ManifestLine>(&line)
                .map_err(|e| parse_error(path, no, e.to_string()))?
            {
                ManifestLine::Header(_) => {
                    return Err(parse_error(path, no, "duplicate header record"))
                }
                ManifestLine::Sample {
                    sample_id,
                    caption_id,
                    class_id,
                    prompt_seed,
                    latent_seed,
                    guidance_scale,
                    feature,
                } => {
                    if feature.len() != header.config.feature_dim {
                        return Err(parse_error(
                            path,
                            no,
                            format!(
                                "feature has {} values, expected {}",
                                feature.len(),
                                header.config.feature_dim
                            ),
                        ));
                    }
                    records.push(SampleRecord {
                        sample_id,
                        caption_id,
                        class_id,
                        prompt_seed,
                        latent_seed,
                        guidance_scale,
                        feature,
                    })
                }
            }
        }
        if records.len() != header.num_samples {
            return Err(parse_error(
                path,
                0,
                format!(
                    "header declares {} samples, found {}",
                    header.num_samples,
                    records.len()
                ),
            ));
        }
        let groups = build_groups(&records)?;
        Ok(Self {
            header,
            records,
            groups,
        })
    }
}

fn build_groups(records: &[SampleRecord]) -> Result<Vec<CaptionGroup>> {
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut groups: Vec<CaptionGroup> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match index.get(&r.caption_id) {
            Some(&g) => {
                let group = &mut groups[g];
                if group.class_id != r.class_id || group.prompt_seed != r.prompt_seed {
                    return Err(Error::InvalidConfig(format!(
                        "caption {} has inconsistent prompt fields",
                        r.caption_id
                    )));
                }
                group.sample_indices.push(i);
            }
            None => {
                index.insert(r.caption_id, groups.len());
                groups.push(CaptionGroup {
                    caption_id: r.caption_id,
                    class_id: r.class_id,
                    prompt_seed: r.prompt_seed,
                    sample_indices: vec![i],
                });
            }
        }
    }
    Ok(groups)
}
