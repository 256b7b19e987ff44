//! Multinomial logistic regression with an ℓ2 penalty on the weights.
//!
//! The objective is `(1/N) [Σ_i CE_i + (λ/2) ‖W‖²]`; the bias is not
//! penalized. `λ` plays the role of `1/C` in the usual `C`-parameterized form.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::lbfgs::{minimize, LbfgsOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

impl LogisticModel {
    /// Flat `[W (row-major d x K), b]` vector.
    pub fn to_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .copied()
            .collect()
    }

    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.scores(x).rows().into_iter().map(argmax).collect()
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: &[usize]) -> f64 {
        accuracy(&self.predict(x), y)
    }
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Objective and gradient at flat parameters `theta`.
pub fn objective(
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
    lambda: f64,
    theta: &[f64],
    grad: &mut [f64],
) -> f64 {
    let (n, d) = x.dim();
    let w = ArrayView2::from_shape((d, classes), &theta[..d * classes]).expect("weight shape");
    let b = ArrayView1::from(&theta[d * classes..]);
    let mut z = x.dot(&w) + b;
    let mut loss = 0.0;
    for (mut row, &label) in z.rows_mut().into_iter().zip(y) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        row.mapv_inplace(|v| (v - lse).exp());
        row[label] -= 1.0;
    }
    let reg: f64 = w.iter().map(|v| v * v).sum();
    let inv_n = 1.0 / n as f64;
    let gw = (x.t().dot(&z) + &w * lambda) * inv_n;
    let gb = z.sum_axis(Axis(0)) * inv_n;
    grad[..d * classes].copy_from_slice(gw.as_slice().expect("standard layout"));
    grad[d * classes..].copy_from_slice(gb.as_slice().expect("standard layout"));
    (loss + 0.5 * lambda * reg) * inv_n
}

/// Fit from `init` (flat parameters) or from zeros.
pub fn fit_logistic(
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
    lambda: f64,
    opts: &LbfgsOptions,
    init: Option<&[f64]>,
) -> LogisticModel {
    let d = x.ncols();
    let len = d * classes + classes;
    let x0 = match init {
        Some(v) if v.len() == len => v.to_vec(),
        _ => vec![0.0; len],
    };
    let r = minimize(|t, g| objective(x, y, classes, lambda, t, g), x0, opts);
    let weights = Array2::from_shape_vec((d, classes), r.x[..d * classes].to_vec()).expect("shape");
    let bias = Array1::from(r.x[d * classes..].to_vec());
    LogisticModel {
        weights,
        bias,
        iterations: r.iterations,
        converged: r.converged,
        objective: r.value,
    }
}
