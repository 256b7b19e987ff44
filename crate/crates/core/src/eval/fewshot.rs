use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lbfgs::LbfgsOptions;
use super::logistic::fit_logistic;
use super::probe::check_features;
use super::report::{EvalReport, ReportKind};
use crate::io::config_hash;
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Penalty of the per-episode logistic regression.
    pub lambda: f64,
    pub max_iterations: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 5,
            queries_per_class: 15,
            episodes: 600,
            seed: 0,
            lambda: 1.0,
            max_iterations: 500,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots == 0 || self.queries_per_class == 0 || self.episodes == 0 {
            return Err(Error::InvalidConfig(
                "episodes need ways >= 2 and positive shots, queries and episode count".into(),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Row indices of one task; labels are positions in `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

fn eligible_classes(labels: &[usize], need: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    by_class.retain(|_, v| v.len() >= need);
    by_class
}

pub fn sample_episode(
    by_class: &BTreeMap<usize, Vec<usize>>,
    spec: &EpisodeSpec,
    episode: u64,
) -> Episode {
    let mut rng = rng_from(spec.seed, &[stream::EPISODE, episode]);
    let pool: Vec<usize> = by_class.keys().copied().collect();
    let mut classes: Vec<usize> = index::sample(&mut rng, pool.len(), spec.ways)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    classes.shuffle(&mut rng);
    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries_per_class);
    for (label, c) in classes.iter().enumerate() {
        let rows = &by_class[c];
        let picks = index::sample(&mut rng, rows.len(), spec.shots + spec.queries_per_class);
        for (k, j) in picks.into_iter().enumerate() {
            if k < spec.shots {
                support.push((rows[j], label));
            } else {
                query.push((rows[j], label));
            }
        }
    }
    Episode {
        classes,
        support,
        query,
    }
}

/// Accuracy of each episode, in episode order.
pub fn episode_accuracies(
    x: ArrayView2<f64>,
    labels: &[usize],
    spec: &EpisodeSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_features(x, labels)?;
    let by_class = eligible_classes(labels, spec.shots + spec.queries_per_class);
    if by_class.len() < spec.ways {
        return Err(Error::Insufficient(format!(
            "{} classes have {} samples; {}-way episodes need {}",
            by_class.len(),
            spec.shots + spec.queries_per_class,
            spec.ways,
            spec.ways
        )));
    }
    let solver = LbfgsOptions {
        max_iterations: spec.max_iterations,
        ..LbfgsOptions::default()
    };
    Ok((0..spec.episodes as u64)
        .into_par_iter()
        .map(|e| {
            let ep = sample_episode(&by_class, spec, e);
            let rows = |set: &[(usize, usize)]| set.iter().map(|p| p.0).collect::<Vec<_>>();
            let ys = |set: &[(usize, usize)]| set.iter().map(|p| p.1).collect::<Vec<_>>();
            let sx = x.select(Axis(0), &rows(&ep.support));
            let qx = x.select(Axis(0), &rows(&ep.query));
            let m = fit_logistic(
                sx.view(),
                &ys(&ep.support),
                spec.ways,
                spec.lambda,
                &solver,
                None,
            );
            m.accuracy(qx.view(), &ys(&ep.query))
        })
        .collect())
}

/// Mean episode accuracy with a normal-approximation 95% interval.
pub fn fewshot_eval(
    x: ArrayView2<f64>,
    labels: &[usize],
    spec: &EpisodeSpec,
) -> Result<EvalReport> {
    let accs = episode_accuracies(x, labels, spec)?;
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = if accs.len() > 1 {
        accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let classes = 1 + labels.iter().copied().max().unwrap_or(0);
    Ok(EvalReport {
        kind: ReportKind::FewShot,
        accuracy: mean,
        ci95: Some(1.96 * var.sqrt() / n.sqrt()),
        episodes: Some(accs.len()),
        queries_per_episode: Some(spec.ways * spec.queries_per_class),
        num_train: spec.ways * spec.shots,
        num_test: spec.ways * spec.queries_per_class,
        num_classes: classes,
        config_hash: config_hash(spec)?,
        ..EvalReport::default()
    })
}
