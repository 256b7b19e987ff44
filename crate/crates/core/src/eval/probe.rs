use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::lbfgs::LbfgsOptions;
use super::logistic::fit_logistic;
use super::report::{EvalReport, ReportKind};
use crate::io::config_hash;
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// `n` points from `lo` to `hi` with a constant ratio between neighbours.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.log10(), hi.log10());
    let mut g: Vec<f64> = (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect();
    g[0] = lo;
    g[n - 1] = hi;
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub reg_grid: Vec<f64>,
    pub max_iterations: usize,
    pub grad_tol: f64,
    /// Standardize features with training-set mean and variance first.
    pub standardize: bool,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reg_grid: log_grid(1e-6, 1e5, 45),
            max_iterations: 500,
            grad_tol: 1e-6,
            standardize: false,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_grid.is_empty()
            || self.reg_grid.iter().any(|l| !(*l > 0.0 && l.is_finite()))
            || self.reg_grid.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidConfig(
                "reg_grid must be positive and strictly increasing".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "val_fraction must be in (0, 1)".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }

    fn solver(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            grad_tol: self.grad_tol,
            ..LbfgsOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub val_accuracy: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-class seeded split; each class with at least two samples puts
/// `round(fraction × count)` (at least one) of them in the second part.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for (c, mut idx) in by_class {
        let mut rng = rng_from(seed, &[stream::PROBE_SPLIT, c as u64]);
        idx.shuffle(&mut rng);
        let k = if idx.len() < 2 {
            0
        } else {
            ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
        };
        held.extend_from_slice(&idx[..k]);
        keep.extend_from_slice(&idx[k..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// Split rows by group (e.g. caption) so no group lands on both sides.
pub fn group_split(groups: &[u64], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<u64> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = rng_from(seed, &[stream::PROBE_SPLIT, u64::MAX]);
    ids.shuffle(&mut rng);
    let k = (fraction * ids.len() as f64).round() as usize;
    let held: std::collections::HashSet<u64> = ids[..k].iter().copied().collect();
    let (mut keep, mut out) = (Vec::new(), Vec::new());
    for (i, g) in groups.iter().enumerate() {
        if held.contains(g) {
            out.push(i);
        } else {
            keep.push(i);
        }
    }
    (keep, out)
}

/// Column mean and standard deviation of the training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.var_axis(Axis(0), 0.0).mapv(|v| (v + 1e-5).sqrt());
        Self { mean, std }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }
}

pub(crate) fn check_features(x: ArrayView2<f64>, y: &[usize]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "features contain NaN or infinity".into(),
        });
    }
    Ok(())
}

fn select(x: ArrayView2<f64>, y: &[usize], idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (x.select(Axis(0), idx), idx.iter().map(|&i| y[i]).collect())
}

/// Fit on a validation split for each `λ` in the grid, keep the best by
/// validation accuracy (ties go to the larger `λ`), refit on all training
/// rows and score the test rows.
pub fn linear_probe(
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    test_x: ArrayView2<f64>,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_features(train_x, train_y)?;
    check_features(test_x, test_y)?;
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: train_x.ncols(),
            got: test_x.ncols(),
        });
    }
    let mut distinct: Vec<usize> = train_y.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Insufficient(
            "linear probe needs at least 2 classes".into(),
        ));
    }
    let classes = 1 + train_y.iter().chain(test_y).copied().max().unwrap_or(0);

    let (train_x, test_x) = if cfg.standardize {
        let s = Standardizer::fit(train_x);
        (s.apply(train_x), s.apply(test_x))
    } else {
        (train_x.to_owned(), test_x.to_owned())
    };
    let (fit_idx, val_idx) = stratified_split(train_y, cfg.val_fraction, cfg.seed);
    if val_idx.is_empty() || fit_idx.is_empty() {
        return Err(Error::Insufficient(
            "too few samples for a validation split".into(),
        ));
    }
    let (fx, fy) = select(train_x.view(), train_y, &fit_idx);
    let (vx, vy) = select(train_x.view(), train_y, &val_idx);

    let solver = cfg.solver();
    let mut grid = vec![None; cfg.reg_grid.len()];
    let mut warm: Option<Vec<f64>> = None;
    let mut solutions = vec![Vec::new(); cfg.reg_grid.len()];
    for i in (0..cfg.reg_grid.len()).rev() {
        let lambda = cfg.reg_grid[i];
        let m = fit_logistic(fx.view(), &fy, classes, lambda, &solver, warm.as_deref());
        grid[i] = Some(GridPoint {
            lambda,
            val_accuracy: m.accuracy(vx.view(), &vy),
            iterations: m.iterations,
            converged: m.converged,
        });
        let flat = m.to_flat();
        solutions[i] = flat.clone();
        warm = Some(flat);
    }
    let grid: Vec<GridPoint> = grid.into_iter().map(|g| g.expect("filled")).collect();
    let best = (0..grid.len())
        .rev()
        .max_by(|&a, &b| {
            grid[a]
                .val_accuracy
                .partial_cmp(&grid[b].val_accuracy)
                .expect("finite accuracy")
                .then(a.cmp(&b))
        })
        .expect("non-empty grid");
    let lambda = grid[best].lambda;
    let final_model = fit_logistic(
        train_x.view(),
        train_y,
        classes,
        lambda,
        &solver,
        Some(&solutions[best]),
    );
    let accuracy = final_model.accuracy(test_x.view(), test_y);
    Ok(EvalReport {
        kind: ReportKind::LinearProbe,
        accuracy,
        selected_lambda: Some(lambda),
        grid,
        num_train: train_y.len(),
        num_test: test_y.len(),
        num_classes: classes,
        config_hash: config_hash(cfg)?,
        ..EvalReport::default()
    })
}
