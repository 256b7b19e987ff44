//! Frozen-feature evaluation: a logistic-regression linear probe with a
//! validation sweep over the penalty, episodic few-shot classification, and
//! report rendering.

mod features;
mod fewshot;
mod lbfgs;
mod logistic;
mod probe;
mod report;


pub use features::{FeatureHeader, FeatureSet, FeatureSpace, FEATURES_FORMAT};
pub use fewshot::{episode_accuracies, fewshot_eval, sample_episode, Episode, EpisodeSpec};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult};
pub use logistic::{accuracy, fit_logistic, LogisticModel};
pub use probe::{
    group_split, linear_probe, log_grid, stratified_split, GridPoint, ProbeConfig, Standardizer,
};
pub use report::{emit_report, write_report, EvalReport, ReportFormat, ReportKind};
