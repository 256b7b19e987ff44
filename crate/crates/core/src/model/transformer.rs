//! Tiny pre-norm transformer over patches of the input vector. The class
//! token's final state is the representation.

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, LayerNorm, LayerNormCache, Linear};
use super::params::{Layout, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            width: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    patch_size: usize,
    tokens: usize,
    width: usize,
    heads: usize,
}

struct BlockCache {
    ln1: LayerNormCache,
    a_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    m_in: Array2<f64>,
    f1: Array2<f64>,
    r: Array2<f64>,
}

pub struct SampleCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

fn softmax_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    x
}

impl Transformer {
    pub fn new(layout: &mut Layout, input_dim: usize, cfg: &TransformerConfig) -> Self {
        let tokens = input_dim / cfg.patch_size;
        let w = cfg.width;
        let patch_embed = Linear::new(layout, "backbone.patch_embed", cfg.patch_size, w);
        let cls = layout.add("backbone.cls_token", 1, w);
        let pos = layout.add("backbone.pos_embed", tokens + 1, w);
        let blocks = (0..cfg.depth)
            .map(|b| {
                let p = format!("backbone.block{b}");
                Block {
                    ln1: LayerNorm::new(layout, &format!("{p}.ln1"), w),
                    wq: layout.add(format!("{p}.attn.wq"), w, w),
                    wk: layout.add(format!("{p}.attn.wk"), w, w),
                    wv: layout.add(format!("{p}.attn.wv"), w, w),
                    proj: Linear::new(layout, &format!("{p}.attn.proj"), w, w),
                    ln2: LayerNorm::new(layout, &format!("{p}.ln2"), w),
                    fc1: Linear::new(layout, &format!("{p}.mlp.fc1"), w, w * cfg.mlp_ratio),
                    fc2: Linear::new(layout, &format!("{p}.mlp.fc2"), w * cfg.mlp_ratio, w),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(layout, "backbone.final_norm", w);
        Self {
            patch_embed,
            cls,
            pos,
            blocks,
            final_norm,
            patch_size: cfg.patch_size,
            tokens,
            width: w,
            heads: cfg.heads,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.width
    }

    pub fn init<R: Rng>(&self, layout: &Layout, params: &mut [f64], rng: &mut R) {
        self.patch_embed.init(layout, params, rng);
        for id in [self.cls, self.pos] {
            for v in &mut params[layout.range(id)] {
                *v = 0.02 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let bound = 1.0 / (self.width as f64).sqrt();
        for b in &self.blocks {
            b.ln1.init(layout, params);
            b.ln2.init(layout, params);
            for id in [b.wq, b.wk, b.wv] {
                for v in &mut params[layout.range(id)] {
                    *v = rng.random_range(-bound..bound);
                }
            }
            b.proj.init(layout, params, rng);
            b.fc1.init(layout, params, rng);
            b.fc2.init(layout, params, rng);
        }
        self.final_norm.init(layout, params);
    }

    fn head_cols(&self, h: usize) -> std::ops::Range<usize> {
        let dh = self.width / self.heads;
        h * dh..(h + 1) * dh
    }

    pub fn forward_sample(
        &self,
        layout: &Layout,
        params: &[f64],
        x: ArrayView1<f64>,
    ) -> (Vec<f64>, SampleCache) {
        let patches = x
            .to_owned()
            .into_shape_with_order((self.tokens, self.patch_size))
            .expect("patchable input");
        let embedded = self.patch_embed.forward(layout, params, patches.view());
        let mut h = Array2::zeros((self.tokens + 1, self.width));
        h.row_mut(0).assign(&layout.view(params, self.cls).row(0));
        h.slice_mut(s![1.., ..]).assign(&embedded);
        h += &layout.view(params, self.pos);

        let scale = 1.0 / ((self.width / self.heads) as f64).sqrt();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a_in, ln1) = b.ln1.forward(layout, params, h.view());
            let q = a_in.dot(&layout.view(params, b.wq));
            let k = a_in.dot(&layout.view(params, b.wk));
            let v = a_in.dot(&layout.view(params, b.wv));
            let mut o = Array2::zeros(h.dim());
            let mut attn = Vec::with_capacity(self.heads);
            for head in 0..self.heads {
                let cols = self.head_cols(head);
                let qh = q.slice(s![.., cols.clone()]);
                let kh = k.slice(s![.., cols.clone()]);
                let vh = v.slice(s![.., cols.clone()]);
                let a = softmax_rows(qh.dot(&kh.t()) * scale);
                o.slice_mut(s![.., cols]).assign(&a.dot(&vh));
                attn.push(a);
            }
            let h_mid = &h + &b.proj.forward(layout, params, o.view());
            let (m_in, ln2) = b.ln2.forward(layout, params, h_mid.view());
            let f1 = b.fc1.forward(layout, params, m_in.view());
            let r = relu(&f1);
            let h_out = &h_mid + &b.fc2.forward(layout, params, r.view());
            h = h_out;
            caches.push(BlockCache {
                ln1,
                a_in,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                m_in,
                f1,
                r,
            });
        }
        let (y, final_ln) = self.final_norm.forward(layout, params, h.view());
        (
            y.row(0).to_vec(),
            SampleCache {
                patches,
                blocks: caches,
                final_ln,
            },
        )
    }

    /// Accumulate gradients for one sample given `d representation`.
    pub fn backward_sample(
        &self,
        layout: &Layout,
        params: &[f64],
        grads: &mut [f64],
        cache: &SampleCache,
        d_rep: ArrayView1<f64>,
    ) {
        let mut dy = Array2::zeros((self.tokens + 1, self.width));
        dy.row_mut(0).assign(&d_rep);
        let mut dh = self
            .final_norm
            .backward(layout, params, grads, &cache.final_ln, dy.view());
        let scale = 1.0 / ((self.width / self.heads) as f64).sqrt();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // h_out = h_mid + fc2(relu(fc1(ln2(h_mid))))
            let dr = b.fc2.backward(layout, params, grads, c.r.view(), dh.view());
            let df1 = relu_backward(&c.f1, &dr);
            let dm_in = b
                .fc1
                .backward(layout, params, grads, c.m_in.view(), df1.view());
            let mut dh_mid = dh;
            dh_mid += &b.ln2.backward(layout, params, grads, &c.ln2, dm_in.view());

            // h_mid = h_in + proj(attention(ln1(h_in)))
            let d_o = b
                .proj
                .backward(layout, params, grads, c.o.view(), dh_mid.view());
            let mut dq = Array2::zeros(c.q.dim());
            let mut dk = Array2::zeros(c.k.dim());
            let mut dv = Array2::zeros(c.v.dim());
            for (head, a) in c.attn.iter().enumerate() {
                let cols = self.head_cols(head);
                let doh = d_o.slice(s![.., cols.clone()]);
                let vh = c.v.slice(s![.., cols.clone()]);
                let qh = c.q.slice(s![.., cols.clone()]);
                let kh = c.k.slice(s![.., cols.clone()]);
                let da = doh.dot(&vh.t());
                dv.slice_mut(s![.., cols.clone()]).assign(&a.t().dot(&doh));
                let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (&da - &row_dot) * a * scale;
                dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
            }
            let mut da_in = Array2::zeros(c.a_in.dim());
            for (id, d) in [(b.wq, &dq), (b.wk, &dk), (b.wv, &dv)] {
                layout
                    .view_mut(grads, id)
                    .scaled_add(1.0, &c.a_in.t().dot(d));
                da_in += &d.dot(&layout.view(params, id).t());
            }
            let mut dh_in = dh_mid;
            dh_in += &b.ln1.backward(layout, params, grads, &c.ln1, da_in.view());
            dh = dh_in;
        }
        // h0 = [cls; patches We + be] + pos
        layout.view_mut(grads, self.pos).scaled_add(1.0, &dh);
        layout
            .view_mut(grads, self.cls)
            .row_mut(0)
            .scaled_add(1.0, &dh.row(0));
        let d_embedded = dh.slice(s![1.., ..]);
        let _ = self
            .patch_embed
            .backward(layout, params, grads, cache.patches.view(), d_embedded);
    }

    pub fn check_input(input_dim: usize, cfg: &TransformerConfig) -> Result<(), String> {
        if cfg.patch_size == 0 || !input_dim.is_multiple_of(cfg.patch_size) {
            return Err(format!(
                "patch_size {} must divide input_dim {input_dim}",
                cfg.patch_size
            ));
        }
        if cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) {
            return Err(format!(
                "heads {} must divide width {}",
                cfg.heads, cfg.width
            ));
        }
        if cfg.depth == 0 || cfg.mlp_ratio == 0 {
            return Err("depth and mlp_ratio must be >= 1".into());
        }
        Ok(())
    }
}
