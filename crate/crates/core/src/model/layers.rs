use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Layout, ParamId};
use super::Mode;

/// `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), fan_in, fan_out),
            bias: layout.add(format!("{name}.bias"), 1, fan_out),
            fan_in,
            fan_out,
        }
    }

    /// Symmetric uniform init with bound `1 / sqrt(fan_in)`.
    pub fn init<R: Rng>(&self, layout: &Layout, params: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        for id in [self.weight, self.bias] {
            for v in &mut params[layout.range(id)] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn forward(&self, layout: &Layout, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&layout.view(params, self.weight)) + layout.view(params, self.bias)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        layout: &Layout,
        params: &[f64],
        grads: &mut [f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        layout
            .view_mut(grads, self.weight)
            .scaled_add(1.0, &x.t().dot(&dy));
        layout
            .view_mut(grads, self.bias)
            .scaled_add(1.0, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        dy.dot(&layout.view(params, self.weight).t())
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, p| {
        if *p <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Statistics used by the normalization layers of the projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch statistics in training, running statistics in evaluation.
    #[default]
    Batch,
    /// Statistics over the features of each sample; identical in both modes.
    PerSample,
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalization with learnable affine `gamma`, `beta`.
#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    x_hat: Array2<f64>,
    /// Per column (batch statistics) or per row (per-sample statistics).
    inv_std: Array1<f64>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    used_batch_stats: bool,
}

impl Norm {
    pub fn new(
        layout: &mut Layout,
        buffers: &mut Layout,
        name: &str,
        dim: usize,
        kind: NormKind,
    ) -> Self {
        Self {
            kind,
            gamma: layout.add(format!("{name}.gamma"), 1, dim),
            beta: layout.add(format!("{name}.beta"), 1, dim),
            running_mean: buffers.add(format!("{name}.running_mean"), 1, dim),
            running_var: buffers.add(format!("{name}.running_var"), 1, dim),
            dim,
        }
    }

    pub fn init(
        &self,
        layout: &Layout,
        params: &mut [f64],
        buffer_layout: &Layout,
        buffers: &mut [f64],
    ) {
        params[layout.range(self.gamma)].fill(1.0);
        params[layout.range(self.beta)].fill(0.0);
        buffers[buffer_layout.range(self.running_mean)].fill(0.0);
        buffers[buffer_layout.range(self.running_var)].fill(1.0);
    }

    pub fn forward(
        &self,
        layout: &Layout,
        params: &[f64],
        buffer_layout: &Layout,
        buffers: &[f64],
        x: ArrayView2<f64>,
        mode: Mode,
    ) -> (Array2<f64>, NormCache) {
        let gamma = layout.view(params, self.gamma);
        let beta = layout.view(params, self.beta);
        let cache = match self.kind {
            NormKind::Batch => {
                let (mean, var, used) = match mode {
                    Mode::Train => {
                        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                        let var = x.var_axis(Axis(0), 0.0);
                        (mean, var, true)
                    }
                    Mode::Eval => (
                        buffer_layout
                            .view(buffers, self.running_mean)
                            .row(0)
                            .to_owned(),
                        buffer_layout
                            .view(buffers, self.running_var)
                            .row(0)
                            .to_owned(),
                        false,
                    ),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let x_hat =
                    (&x - &mean.view().insert_axis(Axis(0))) * inv_std.view().insert_axis(Axis(0));
                NormCache {
                    x_hat,
                    inv_std,
                    batch_mean: used.then_some(mean),
                    batch_var: used.then_some(var),
                    used_batch_stats: used,
                }
            }
            NormKind::PerSample => {
                let mean = x.mean_axis(Axis(1)).expect("non-empty features");
                let var = x.var_axis(Axis(1), 0.0);
                let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let x_hat =
                    (&x - &mean.view().insert_axis(Axis(1))) * inv_std.view().insert_axis(Axis(1));
                NormCache {
                    x_hat,
                    inv_std,
                    batch_mean: None,
                    batch_var: None,
                    used_batch_stats: false,
                }
            }
        };
        let y = &cache.x_hat * &gamma + beta;
        (y, cache)
    }

    pub fn backward(
        &self,
        layout: &Layout,
        params: &[f64],
        grads: &mut [f64],
        cache: &NormCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let gamma = layout.view(params, self.gamma);
        layout.view_mut(grads, self.gamma).scaled_add(
            1.0,
            &(&dy * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0)),
        );
        layout
            .view_mut(grads, self.beta)
            .scaled_add(1.0, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dx_hat = &dy * &gamma;
        match self.kind {
            NormKind::Batch if cache.used_batch_stats => {
                let mean_d = dx_hat.mean_axis(Axis(0)).unwrap();
                let mean_dx = (&dx_hat * &cache.x_hat).mean_axis(Axis(0)).unwrap();
                let centered = &dx_hat
                    - &mean_d.insert_axis(Axis(0))
                    - &(&cache.x_hat * &mean_dx.insert_axis(Axis(0)));
                centered * cache.inv_std.view().insert_axis(Axis(0))
            }
            NormKind::Batch => dx_hat * cache.inv_std.view().insert_axis(Axis(0)),
            NormKind::PerSample => {
                let mean_d = dx_hat.mean_axis(Axis(1)).unwrap();
                let mean_dx = (&dx_hat * &cache.x_hat).mean_axis(Axis(1)).unwrap();
                let centered = &dx_hat
                    - &mean_d.insert_axis(Axis(1))
                    - &(&cache.x_hat * &mean_dx.insert_axis(Axis(1)));
                centered * cache.inv_std.view().insert_axis(Axis(1))
            }
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`; the running
    /// variance uses the unbiased batch estimate.
    pub fn update_running(
        &self,
        buffer_layout: &Layout,
        buffers: &mut [f64],
        cache: &NormCache,
        batch_size: usize,
        momentum: f64,
    ) {
        let (Some(mean), Some(var)) = (&cache.batch_mean, &cache.batch_var) else {
            return;
        };
        let correction = if batch_size > 1 {
            batch_size as f64 / (batch_size - 1) as f64
        } else {
            1.0
        };
        let mut rm = buffer_layout.view_mut(buffers, self.running_mean);
        rm.row_mut(0)
            .zip_mut_with(mean, |r, b| *r = momentum * *r + (1.0 - momentum) * b);
        let mut rv = buffer_layout.view_mut(buffers, self.running_var);
        rv.row_mut(0).zip_mut_with(var, |r, b| {
            *r = momentum * *r + (1.0 - momentum) * b * correction
        });
    }
}

/// Per-token layer normalization used inside the transformer backbone.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), 1, dim),
            beta: layout.add(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn init(&self, layout: &Layout, params: &mut [f64]) {
        params[layout.range(self.gamma)].fill(1.0);
        params[layout.range(self.beta)].fill(0.0);
    }

    pub fn forward(
        &self,
        layout: &Layout,
        params: &[f64],
        x: ArrayView2<f64>,
    ) -> (Array2<f64>, LayerNormCache) {
        let mean = x.mean_axis(Axis(1)).unwrap();
        let var = x.var_axis(Axis(1), 0.0);
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let x_hat = (&x - &mean.insert_axis(Axis(1))) * inv_std.view().insert_axis(Axis(1));
        let y = &x_hat * &layout.view(params, self.gamma) + layout.view(params, self.beta);
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        layout: &Layout,
        params: &[f64],
        grads: &mut [f64],
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        layout.view_mut(grads, self.gamma).scaled_add(
            1.0,
            &(&dy * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0)),
        );
        layout
            .view_mut(grads, self.beta)
            .scaled_add(1.0, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dx_hat = &dy * &layout.view(params, self.gamma);
        let mean_d = dx_hat.mean_axis(Axis(1)).unwrap();
        let mean_dx = (&dx_hat * &cache.x_hat).mean_axis(Axis(1)).unwrap();
        (&dx_hat - &mean_d.insert_axis(Axis(1)) - &(&cache.x_hat * &mean_dx.insert_axis(Axis(1))))
            * cache.inv_std.view().insert_axis(Axis(1))
    }
}
