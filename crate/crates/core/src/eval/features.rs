use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::gen::DatasetManifest;
use crate::io::{create_writer, fixed_array, parse_error, read_lines, write_json_line};
use crate::model::{Encoder, Mode};
use crate::{Error, Result};

pub const FEATURES_FORMAT: &str = "stablerep-features";

/// Which encoder output is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Backbone output before the projection head.
    #[default]
    Representation,
    /// Unit-norm projection head output.
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub kind: String,
    pub format: String,
    pub space: FeatureSpace,
    pub dim: usize,
    pub count: usize,
    pub dataset_id: String,
    pub checkpoint_id: String,
    /// Hash of the run configuration that produced the file, if any.
    #[serde(default)]
    pub config_hash: String,
}

/// Encoded samples with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub header: FeatureHeader,
    pub sample_ids: Vec<u64>,
    pub caption_ids: Vec<u64>,
    pub class_ids: Vec<usize>,
    pub features: Array2<f64>,
}

#[derive(Serialize)]
struct LineOut<'a> {
    sample_id: u64,
    caption_id: u64,
    class_id: usize,
    feature: &'a RawValue,
}

#[derive(Deserialize)]
struct LineIn {
    sample_id: u64,
    caption_id: u64,
    class_id: usize,
    feature: Vec<f64>,
}

/// Rows per encoder call when extracting features.
const CHUNK: usize = 1024;

impl FeatureSet {
    /// Encode every manifest sample in eval mode.
    pub fn extract(
        encoder: &Encoder,
        manifest: &DatasetManifest,
        space: FeatureSpace,
        checkpoint_id: &str,
    ) -> Result<Self> {
        let records = manifest.records();
        let x = Array2::from_shape_vec(
            (records.len(), manifest.feature_dim()),
            records
                .iter()
                .flat_map(|r| r.feature.iter().copied())
                .collect(),
        )
        .expect("rectangular manifest");
        let dim = match space {
            FeatureSpace::Representation => encoder.config().representation_dim(),
            FeatureSpace::Projected => encoder.config().projection_dim,
        };
        let mut features = Array2::zeros((records.len(), dim));
        for start in (0..records.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(records.len());
            let out = encoder.encode(x.slice(ndarray::s![start..end, ..]), Mode::Eval)?;
            let block = match space {
                FeatureSpace::Representation => out.representation,
                FeatureSpace::Projected => out.projected,
            };
            features
                .slice_mut(ndarray::s![start..end, ..])
                .assign(&block);
        }
        Ok(Self {
            header: FeatureHeader {
                kind: "header".into(),
                format: FEATURES_FORMAT.into(),
                space,
                dim,
                count: records.len(),
                dataset_id: manifest.header().config_hash.clone(),
                checkpoint_id: checkpoint_id.to_string(),
                config_hash: String::new(),
            },
            sample_ids: records.iter().map(|r| r.sample_id).collect(),
            caption_ids: records.iter().map(|r| r.caption_id).collect(),
            class_ids: records.iter().map(|r| r.class_id).collect(),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create_writer(path)?;
        write_json_line(&mut w, &self.header)?;
        for (i, row) in self.features.rows().into_iter().enumerate() {
            let feature = fixed_array(&row.to_vec())?;
            write_json_line(
                &mut w,
                &LineOut {
                    sample_id: self.sample_ids[i],
                    caption_id: self.caption_ids[i],
                    class_id: self.class_ids[i],
                    feature: &feature,
                },
            )?;
        }
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let Some((first_no, first)) = lines.first() else {
            return Err(parse_error(path, 1, "empty feature file"));
        };
        let header: FeatureHeader =
            serde_json::from_str(first).map_err(|e| parse_error(path, *first_no, e.to_string()))?;
        if header.format != FEATURES_FORMAT {
            return Err(Error::UnknownFormat(header.format));
        }
        let mut data = Vec::with_capacity(header.count * header.dim);
        let (mut sample_ids, mut caption_ids, mut class_ids) = (Vec::new(), Vec::new(), Vec::new());
        for (no, line) in &lines[1..] {
            let rec: LineIn =
                serde_json::from_str(line).map_err(|e| parse_error(path, *no, e.to_string()))?;
            if rec.feature.len() != header.dim {
                return Err(parse_error(
                    path,
                    *no,
                    format!(
                        "feature has {} values, header says {}",
                        rec.feature.len(),
                        header.dim
                    ),
                ));
            }
            sample_ids.push(rec.sample_id);
            caption_ids.push(rec.caption_id);
            class_ids.push(rec.class_id);
            data.extend(rec.feature);
        }
        if class_ids.len() != header.count {
            return Err(parse_error(
                path,
                lines.len(),
                format!("{} records, header says {}", class_ids.len(), header.count),
            ));
        }
        let features = Array2::from_shape_vec((header.count, header.dim), data).expect("checked");
        Ok(Self {
            header,
            sample_ids,
            caption_ids,
            class_ids,
            features,
        })
    }
}
