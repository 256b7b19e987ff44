use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Linear, Norm, NormCache, NormKind};
use super::params::Layout;
use super::transformer::{SampleCache, Transformer, TransformerConfig};
use super::Mode;
use crate::objective::{l2_normalize_rows, normalization_backward};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Hidden layers with ReLU, then a linear map to the representation.
    Mlp {
        hidden_dims: Vec<usize>,
        output_dim: usize,
    },
    Transformer(TransformerConfig),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Mlp {
            hidden_dims: vec![256],
            output_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub projection_dim: usize,
    pub norm: NormKind,
    pub norm_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            backbone: BackboneConfig::default(),
            head_hidden: 256,
            projection_dim: 64,
            norm: NormKind::Batch,
            norm_momentum: 0.9,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.projection_dim < 2 {
            return bad(format!(
                "projection_dim must be >= 2, got {}",
                self.projection_dim
            ));
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return bad(format!(
                "norm_momentum must be in [0, 1), got {}",
                self.norm_momentum
            ));
        }
        match &self.backbone {
            BackboneConfig::Mlp {
                hidden_dims,
                output_dim,
            } => {
                if *output_dim == 0 || hidden_dims.contains(&0) {
                    return bad("backbone widths must be >= 1".into());
                }
            }
            BackboneConfig::Transformer(t) => {
                Transformer::check_input(self.input_dim, t).map_err(Error::InvalidConfig)?;
            }
        }
        Ok(())
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(Structure::build(self).layout.len())
    }

    pub fn representation_dim(&self) -> usize {
        match &self.backbone {
            BackboneConfig::Mlp { output_dim, .. } => *output_dim,
            BackboneConfig::Transformer(t) => t.width,
        }
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Mlp(Vec<Linear>),
    Transformer(Transformer),
}

#[derive(Debug, Clone)]
struct Head {
    fc1: Linear,
    norm1: Norm,
    fc2: Linear,
    norm2: Norm,
    fc3: Linear,
}

#[derive(Debug, Clone)]
struct Structure {
    layout: Layout,
    buffer_layout: Layout,
    backbone: Backbone,
    head: Head,
}

impl Structure {
    fn build(cfg: &EncoderConfig) -> Self {
        let mut layout = Layout::default();
        let mut buffer_layout = Layout::default();
        let backbone = match &cfg.backbone {
            BackboneConfig::Mlp {
                hidden_dims,
                output_dim,
            } => {
                let mut dims = vec![cfg.input_dim];
                dims.extend(hidden_dims);
                dims.push(*output_dim);
                Backbone::Mlp(
                    dims.windows(2)
                        .enumerate()
                        .map(|(i, w)| {
                            Linear::new(&mut layout, &format!("backbone.fc{i}"), w[0], w[1])
                        })
                        .collect(),
                )
            }
            BackboneConfig::Transformer(t) => {
                Backbone::Transformer(Transformer::new(&mut layout, cfg.input_dim, t))
            }
        };
        let r = cfg.representation_dim();
        let h = cfg.head_hidden;
        let head = Head {
            fc1: Linear::new(&mut layout, "head.fc1", r, h),
            norm1: Norm::new(&mut layout, &mut buffer_layout, "head.norm1", h, cfg.norm),
            fc2: Linear::new(&mut layout, "head.fc2", h, h),
            norm2: Norm::new(&mut layout, &mut buffer_layout, "head.norm2", h, cfg.norm),
            fc3: Linear::new(&mut layout, "head.fc3", h, cfg.projection_dim),
        };
        Self {
            layout,
            buffer_layout,
            backbone,
            head,
        }
    }
}

/// One input's probe-facing feature and its unit-norm projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub pre_projection: Vec<f64>,
    pub projected: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub representation: Array2<f64>,
    pub projected: Array2<f64>,
}

enum BackboneCache {
    /// Input to each linear layer, plus pre-activations of the hidden ones.
    Mlp {
        inputs: Vec<Array2<f64>>,
        pre: Vec<Array2<f64>>,
    },
    Transformer(Vec<SampleCache>),
}

/// Intermediate values needed by [`Encoder::backward`].
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    backbone: BackboneCache,
    rep: Array2<f64>,
    n1: NormCache,
    z1: Array2<f64>,
    a1: Array2<f64>,
    n2: NormCache,
    z2: Array2<f64>,
    a2: Array2<f64>,
    u: Array2<f64>,
    norms: ndarray::Array1<f64>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Encoder with its parameters and normalization buffers.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    structure: Structure,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

impl Encoder {
    /// Fresh encoder with weights drawn from `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let structure = Structure::build(&config);
        let mut params = vec![0.0; structure.layout.len()];
        let mut buffers = vec![0.0; structure.buffer_layout.len()];
        let mut rng = rng_from(seed, &[stream::INIT]);
        let (l, bl) = (&structure.layout, &structure.buffer_layout);
        match &structure.backbone {
            Backbone::Mlp(layers) => layers.iter().for_each(|f| f.init(l, &mut params, &mut rng)),
            Backbone::Transformer(t) => t.init(l, &mut params, &mut rng),
        }
        let hd = &structure.head;
        hd.fc1.init(l, &mut params, &mut rng);
        hd.norm1.init(l, &mut params, bl, &mut buffers);
        hd.fc2.init(l, &mut params, &mut rng);
        hd.norm2.init(l, &mut params, bl, &mut buffers);
        hd.fc3.init(l, &mut params, &mut rng);
        Ok(Self {
            config,
            structure,
            params,
            buffers,
        })
    }

    /// Rebuild from stored parameter and buffer vectors.
    pub fn from_parts(config: EncoderConfig, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let structure = Structure::build(&config);
        if params.len() != structure.layout.len() {
            return Err(Error::DimensionMismatch {
                expected: structure.layout.len(),
                got: params.len(),
            });
        }
        if buffers.len() != structure.buffer_layout.len() {
            return Err(Error::DimensionMismatch {
                expected: structure.buffer_layout.len(),
                got: buffers.len(),
            });
        }
        if params.iter().chain(&buffers).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "encoder state has non-finite values".into(),
            ));
        }
        Ok(Self {
            config,
            structure,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.structure.layout
    }

    pub fn buffer_layout(&self) -> &Layout {
        &self.structure.buffer_layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    /// Encode a batch (one input per row).
    pub fn encode(&self, x: ArrayView2<f64>, mode: Mode) -> Result<EncoderOutput> {
        self.forward(x, mode).map(|(out, _)| out)
    }

    /// Encode one input. In train mode a single-row batch has zero batch
    /// variance, so callers normally use eval mode here.
    pub fn encode_one(&self, x: &[f64], mode: Mode) -> Result<Representation> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let out = self.encode(view, mode)?;
        Ok(Representation {
            pre_projection: out.representation.row(0).to_vec(),
            projected: out.projected.row(0).to_vec(),
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<(EncoderOutput, ForwardCache)> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::Insufficient("empty batch".into()));
        }
        let s = &self.structure;
        let (l, p) = (&s.layout, self.params.as_slice());
        let (rep, backbone) = match &s.backbone {
            Backbone::Mlp(layers) => {
                let mut inputs = Vec::with_capacity(layers.len());
                let mut pre = Vec::with_capacity(layers.len() - 1);
                let mut h = x.to_owned();
                for (i, layer) in layers.iter().enumerate() {
                    let z = layer.forward(l, p, h.view());
                    inputs.push(h);
                    if i + 1 < layers.len() {
                        h = relu(&z);
                        pre.push(z);
                    } else {
                        h = z;
                    }
                }
                (h, BackboneCache::Mlp { inputs, pre })
            }
            Backbone::Transformer(t) => {
                let mut rep = Array2::zeros((x.nrows(), t.output_dim()));
                let mut caches = Vec::with_capacity(x.nrows());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let (r, c) = t.forward_sample(l, p, row);
                    rep.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
                    caches.push(c);
                }
                (rep, BackboneCache::Transformer(caches))
            }
        };
        let hd = &s.head;
        let (bl, b) = (&s.buffer_layout, self.buffers.as_slice());
        let h1 = hd.fc1.forward(l, p, rep.view());
        let (z1, n1) = hd.norm1.forward(l, p, bl, b, h1.view(), mode);
        let a1 = relu(&z1);
        let h2 = hd.fc2.forward(l, p, a1.view());
        let (z2, n2) = hd.norm2.forward(l, p, bl, b, h2.view(), mode);
        let a2 = relu(&z2);
        let v = hd.fc3.forward(l, p, a2.view());
        let (u, norms) = l2_normalize_rows(v.view())?;
        let out = EncoderOutput {
            representation: rep.clone(),
            projected: u.clone(),
        };
        let cache = ForwardCache {
            mode,
            batch: x.nrows(),
            backbone,
            rep,
            n1,
            z1,
            a1,
            n2,
            z2,
            a2,
            u,
            norms,
        };
        Ok((out, cache))
    }

    /// Gradient of `sum(d_projected * projected)` with respect to the
    /// parameters, laid out like [`Encoder::params`].
    pub fn backward(&self, cache: &ForwardCache, d_projected: ArrayView2<f64>) -> Result<Vec<f64>> {
        if d_projected.dim() != cache.u.dim() {
            return Err(Error::DimensionMismatch {
                expected: cache.u.len(),
                got: d_projected.len(),
            });
        }
        let s = &self.structure;
        let (l, p) = (&s.layout, self.params.as_slice());
        let mut g = vec![0.0; l.len()];
        let hd = &s.head;
        let dv = normalization_backward(cache.u.view(), &cache.norms, d_projected);
        let da2 = hd.fc3.backward(l, p, &mut g, cache.a2.view(), dv.view());
        let dz2 = relu_backward(&cache.z2, &da2);
        let dh2 = hd.norm2.backward(l, p, &mut g, &cache.n2, dz2.view());
        let da1 = hd.fc2.backward(l, p, &mut g, cache.a1.view(), dh2.view());
        let dz1 = relu_backward(&cache.z1, &da1);
        let dh1 = hd.norm1.backward(l, p, &mut g, &cache.n1, dz1.view());
        let drep = hd.fc1.backward(l, p, &mut g, cache.rep.view(), dh1.view());
        match (&s.backbone, &cache.backbone) {
            (Backbone::Mlp(layers), BackboneCache::Mlp { inputs, pre }) => {
                let mut dh = drep;
                for (i, layer) in layers.iter().enumerate().rev() {
                    if i + 1 < layers.len() {
                        dh = relu_backward(&pre[i], &dh);
                    }
                    dh = layer.backward(l, p, &mut g, inputs[i].view(), dh.view());
                }
            }
            (Backbone::Transformer(t), BackboneCache::Transformer(caches)) => {
                for (c, d) in caches.iter().zip(drep.rows()) {
                    t.backward_sample(l, p, &mut g, c, d);
                }
            }
            _ => unreachable!("cache built by this encoder"),
        }
        Ok(g)
    }

    /// Fold the batch statistics of a train-mode forward into the running
    /// statistics used in eval mode.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let s = &self.structure;
        let m = self.config.norm_momentum;
        s.head.norm1.update_running(
            &s.buffer_layout,
            &mut self.buffers,
            &cache.n1,
            cache.batch,
            m,
        );
        s.head.norm2.update_running(
            &s.buffer_layout,
            &mut self.buffers,
            &cache.n2,
            cache.batch,
            m,
        );
    }
}
