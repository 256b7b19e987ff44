//! Multi-positive contrastive objective.
//!
//! For an anchor `i` the candidate distribution is a softmax of `e_i . e_j / tau`
//! over all other rows of the batch; the target distribution is uniform over
//! the rows that share the anchor's caption. The loss is their cross-entropy
//! averaged over anchors. With two rows per caption this is the usual
//! single-positive (SimCLR) loss.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on `|‖e‖ - 1|` for rows declared normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidConfig(format!(
                "temperature must be finite and > 0, got {tau}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// What the returned gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// Input rows are already unit-norm; gradient w.r.t. them.
    #[default]
    Normalized,
    /// Input rows are raw; they are normalized internally and the gradient
    /// is chained through the normalization.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    pub grad: Array2<f64>,
}

/// Ground-truth distribution: row-stochastic with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub p: Array2<f64>,
}

pub fn check_unit_rows(e: ArrayView2<f64>) -> Result<()> {
    for (row, r) in e.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Row-wise `v / ‖v‖`; returns the normalized rows and the norms.
pub fn l2_normalize_rows(v: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(row) = norms.iter().position(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(Error::NonFinite {
            step: row,
            what: "cannot normalize a zero or non-finite row".into(),
        });
    }
    let u = &v / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Pull a gradient on `u = v / ‖v‖` back to `v`: `(I - u uᵀ) du / ‖v‖`.
pub fn normalization_backward(
    u: ArrayView2<f64>,
    norms: &Array1<f64>,
    du: ArrayView2<f64>,
) -> Array2<f64> {
    let mut dv = du.to_owned();
    for ((mut g, ur), n) in dv.rows_mut().into_iter().zip(u.rows()).zip(norms) {
        let proj = ur.dot(&g);
        g.zip_mut_with(&ur, |gk, uk| *gk = (*gk - proj * uk) / n);
    }
    dv
}

fn check_batch(e: ArrayView2<f64>, ids: &[u64]) -> Result<()> {
    if ids.len() != e.nrows() {
        return Err(Error::DimensionMismatch {
            expected: e.nrows(),
            got: ids.len(),
        });
    }
    if e.nrows() < 2 {
        return Err(Error::Insufficient(
            "contrastive batch needs at least 2 rows".into(),
        ));
    }
    Ok(())
}

/// Log of the self-masked softmax of `E Eᵀ / tau`; diagonal is `-inf`.
fn masked_log_softmax(e: ArrayView2<f64>, tau: Temperature) -> Array2<f64> {
    let c = e.nrows();
    let mut logits = e.dot(&e.t()) / tau.get();
    for i in 0..c {
        let mut row = logits.row_mut(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let lse = max + sum.ln();
        row.mapv_inplace(|v| v - lse);
        row[i] = f64::NEG_INFINITY;
    }
    logits
}

/// Candidate distribution `q` with the anchor excluded (zero diagonal).
pub fn contrastive_distribution(e: ArrayView2<f64>, tau: Temperature) -> Result<Array2<f64>> {
    check_unit_rows(e)?;
    if e.nrows() < 2 {
        return Err(Error::Insufficient(
            "contrastive batch needs at least 2 rows".into(),
        ));
    }
    Ok(masked_log_softmax(e, tau).mapv(f64::exp))
}

/// `p[i][j] = 1 / (m_i - 1)` for same-caption `j != i`, else 0.
pub fn match_distribution(caption_ids: &[u64]) -> Result<MatchMatrix> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for id in caption_ids {
        *counts.entry(*id).or_default() += 1;
    }
    let c = caption_ids.len();
    let mut p = Array2::zeros((c, c));
    for (i, a) in caption_ids.iter().enumerate() {
        let positives = counts[a] - 1;
        if positives == 0 {
            return Err(Error::NoPositive {
                row: i,
                caption_id: *a,
            });
        }
        let mass = 1.0 / positives as f64;
        for (j, b) in caption_ids.iter().enumerate() {
            if i != j && a == b {
                p[[i, j]] = mass;
            }
        }
    }
    Ok(MatchMatrix { p })
}

/// Mean cross-entropy between the match distribution and the self-masked
/// contrastive distribution, with its exact gradient.
pub fn multi_positive_loss(
    embeddings: ArrayView2<f64>,
    caption_ids: &[u64],
    tau: Temperature,
    target: GradTarget,
) -> Result<LossOutput> {
    check_batch(embeddings, caption_ids)?;
    let normalized;
    let (e, norms) = match target {
        GradTarget::Normalized => {
            check_unit_rows(embeddings)?;
            (embeddings, None)
        }
        GradTarget::Raw => {
            let (u, n) = l2_normalize_rows(embeddings)?;
            normalized = u;
            (normalized.view(), Some(n))
        }
    };
    let MatchMatrix { p } = match_distribution(caption_ids)?;
    let log_q = masked_log_softmax(e, tau);
    let c = e.nrows();

    let per_anchor: Vec<f64> = (0..c)
        .map(|i| {
            -p.row(i)
                .iter()
                .zip(log_q.row(i))
                .filter(|(pij, _)| **pij > 0.0)
                .map(|(pij, lq)| pij * lq)
                .sum::<f64>()
        })
        .collect();
    let loss = per_anchor.iter().sum::<f64>() / c as f64;

    // dL/dlogits = (q - p) / C, logits = E Eᵀ / tau.
    let mut g = log_q.mapv(f64::exp);
    g -= &p;
    g /= c as f64;
    let sym = &g + &g.t();
    let grad_e = sym.dot(&e) / tau.get();
    let grad = match norms {
        Some(n) => normalization_backward(e, &n, grad_e.view()),
        None => grad_e,
    };
    check_finite(loss, &grad)?;
    Ok(LossOutput {
        loss,
        per_anchor,
        grad,
    })
}

fn check_finite(loss: f64, grad: &Array2<f64>) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "contrastive loss or gradient".into(),
        });
    }
    Ok(())
}

/// Un-masked contrast of `anchors` against `candidates` with target rows `p`.
/// Returns `(loss, d_anchors, d_candidates)`.
fn cross_contrast(
    anchors: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    p: &Array2<f64>,
    tau: Temperature,
) -> (f64, Array2<f64>, Array2<f64>) {
    let na = anchors.nrows();
    let mut log_q = anchors.dot(&candidates.t()) / tau.get();
    for mut row in log_q.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    let loss = -p
        .iter()
        .zip(log_q.iter())
        .filter(|(pij, _)| **pij > 0.0)
        .map(|(pij, lq)| pij * lq)
        .sum::<f64>()
        / na as f64;
    let mut g = log_q.mapv(f64::exp);
    g -= p;
    g /= na as f64;
    let d_anchors = g.dot(&candidates) / tau.get();
    let d_candidates = g.t().dot(&anchors) / tau.get();
    (loss, d_anchors, d_candidates)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLossOutput {
    pub image_to_text: f64,
    pub text_to_image: f64,
    /// Gradient of `image_to_text + text_to_image` w.r.t. image rows.
    pub grad_image: Array2<f64>,
    /// Gradient of `image_to_text + text_to_image` w.r.t. text rows.
    pub grad_text: Array2<f64>,
}

impl PairLossOutput {
    pub fn sum(&self) -> f64 {
        self.image_to_text + self.text_to_image
    }
}

/// Two-encoder contrast: row `i` of `image` matches row `i` of `text`.
pub fn pair_contrastive_loss(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    tau: Temperature,
) -> Result<PairLossOutput> {
    if image.dim() != text.dim() {
        return Err(Error::DimensionMismatch {
            expected: image.nrows(),
            got: text.nrows(),
        });
    }
    check_unit_rows(image)?;
    check_unit_rows(text)?;
    let n = image.nrows();
    if n == 0 {
        return Err(Error::Insufficient(
            "pair loss needs at least one pair".into(),
        ));
    }
    let eye = Array2::eye(n);
    let (i2t, gi_a, gt_a) = cross_contrast(image, text, &eye, tau);
    let (t2i, gt_b, gi_b) = cross_contrast(text, image, &eye, tau);
    let out = PairLossOutput {
        image_to_text: i2t,
        text_to_image: t2i,
        grad_image: gi_a + gi_b,
        grad_text: gt_a + gt_b,
    };
    check_finite(out.sum(), &out.grad_image)?;
    check_finite(out.sum(), &out.grad_text)?;
    Ok(out)
}

/// How caption text embeddings meet the `m` images of their caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPairing {
    /// Every image is an anchor against all texts; every text is an anchor
    /// whose positives are all images of its caption.
    #[default]
    PerImage,
    /// Images of a caption are averaged (and renormalized) into one
    /// embedding before a one-to-one pair loss.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlusLossOutput {
    pub total: f64,
    pub multi_positive: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub grad_image: Array2<f64>,
    pub grad_text: Array2<f64>,
}

/// Weight on `image_to_text + text_to_image` in the combined objective.
pub const LANGUAGE_WEIGHT: f64 = 0.5;

/// Multi-positive loss plus `0.5 * (L_i2t + L_t2i)`.
///
/// `text` has one row per entry of `text_ids`; every caption in
/// `caption_ids` must have a text row.
pub fn stablerep_plus_loss(
    image: ArrayView2<f64>,
    caption_ids: &[u64],
    text: ArrayView2<f64>,
    text_ids: &[u64],
    tau: Temperature,
    pairing: TextPairing,
) -> Result<PlusLossOutput> {
    let mp = multi_positive_loss(image, caption_ids, tau, GradTarget::Normalized)?;
    let (i2t, t2i, gi, gt) = language_terms(image, caption_ids, text, text_ids, tau, pairing)?;
    let grad_image = mp.grad + &(gi * LANGUAGE_WEIGHT);
    let grad_text = gt * LANGUAGE_WEIGHT;
    Ok(PlusLossOutput {
        total: mp.loss + LANGUAGE_WEIGHT * (i2t + t2i),
        multi_positive: mp.loss,
        image_to_text: i2t,
        text_to_image: t2i,
        grad_image,
        grad_text,
    })
}

/// `(L_i2t, L_t2i, d(L_i2t + L_t2i)/d image, d(L_i2t + L_t2i)/d text)`.
pub fn language_terms(
    image: ArrayView2<f64>,
    caption_ids: &[u64],
    text: ArrayView2<f64>,
    text_ids: &[u64],
    tau: Temperature,
    pairing: TextPairing,
) -> Result<(f64, f64, Array2<f64>, Array2<f64>)> {
    check_batch(image, caption_ids)?;
    if text.nrows() != text_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: text.nrows(),
            got: text_ids.len(),
        });
    }
    if text.ncols() != image.ncols() {
        return Err(Error::DimensionMismatch {
            expected: image.ncols(),
            got: text.ncols(),
        });
    }
    check_unit_rows(text)?;
    let column: HashMap<u64, usize> = text_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (*id, j))
        .collect();
    if column.len() != text_ids.len() {
        return Err(Error::InvalidConfig(
            "duplicate caption id among text rows".into(),
        ));
    }
    let cols: Vec<usize> = caption_ids
        .iter()
        .map(|id| {
            column
                .get(id)
                .copied()
                .ok_or_else(|| Error::Insufficient(format!("no text embedding for caption {id}")))
        })
        .collect::<Result<_>>()?;
    let c = image.nrows();
    let n = text.nrows();

    match pairing {
        TextPairing::PerImage => {
            let mut p_i2t = Array2::zeros((c, n));
            let mut p_t2i = Array2::zeros((n, c));
            let mut counts = vec![0usize; n];
            for (i, &j) in cols.iter().enumerate() {
                p_i2t[[i, j]] = 1.0;
                counts[j] += 1;
            }
            for (i, &j) in cols.iter().enumerate() {
                p_t2i[[j, i]] = 1.0 / counts[j] as f64;
            }
            if let Some(j) = counts.iter().position(|k| *k == 0) {
                return Err(Error::NoPositive {
                    row: j,
                    caption_id: text_ids[j],
                });
            }
            let (i2t, gi_a, gt_a) = cross_contrast(image, text, &p_i2t, tau);
            let (t2i, gt_b, gi_b) = cross_contrast(text, image, &p_t2i, tau);
            Ok((i2t, t2i, gi_a + gi_b, gt_a + gt_b))
        }
        TextPairing::Pooled => {
            let mut pooled = Array2::zeros((n, image.ncols()));
            let mut counts = vec![0usize; n];
            for (i, &j) in cols.iter().enumerate() {
                pooled.row_mut(j).scaled_add(1.0, &image.row(i));
                counts[j] += 1;
            }
            if let Some(j) = counts.iter().position(|k| *k == 0) {
                return Err(Error::NoPositive {
                    row: j,
                    caption_id: text_ids[j],
                });
            }
            for (mut row, k) in pooled.rows_mut().into_iter().zip(&counts) {
                row /= *k as f64;
            }
            let (u, norms) = l2_normalize_rows(pooled.view())?;
            let pair = pair_contrastive_loss(u.view(), text, tau)?;
            let d_pooled = normalization_backward(u.view(), &norms, pair.grad_image.view());
            let mut gi = Array2::zeros(image.dim());
            for (i, &j) in cols.iter().enumerate() {
                gi.row_mut(i)
                    .scaled_add(1.0 / counts[j] as f64, &d_pooled.row(j));
            }
            Ok((pair.image_to_text, pair.text_to_image, gi, pair.grad_text))
        }
    }
}
