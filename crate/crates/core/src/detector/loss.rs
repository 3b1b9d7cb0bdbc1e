use super::{DetectorError, Result};
use crate::autodiff::{DiffArray, Graph};
use crate::encoding::{AnchorLabel, GpnTargets, HeadTargets};

/// A loss node together with the values of its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub total: DiffArray,
    /// Classification term.
    pub cls: f64,
    /// Weighted regression term; exactly 0 when nothing is gated in.
    pub reg: f64,
}

impl LossTerm {
    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.total).item()
    }
}

/// Regression over the selected rows: the per-row L1 sum averaged over rows,
/// times `weight`. `None` when no row is selected.
fn gated_regression(
    g: &mut Graph,
    rows: DiffArray,
    flat_indices: Vec<usize>,
    targets: Vec<f64>,
    weight: f64,
    smooth: bool,
) -> Result<Option<(DiffArray, f64)>> {
    if flat_indices.is_empty() {
        return Ok(None);
    }
    let n = flat_indices.len() / 4;
    let picked = g.gather(rows, flat_indices, &[n, 4])?;
    let l1 = g.l1_loss(picked, &targets, smooth)?;
    let term = g.scale(l1, 4.0 * weight)?;
    let v = g.value(term).item();
    Ok(Some((term, v)))
}

/// Proposal-stage loss over the sampled anchors: two-way cross-entropy on all
/// of them plus `lambda` times L1 on the positives' box deltas.
///
/// `cls_rows` is (A, 2) with column 1 the grasp logit; `reg_rows` is (A, 4).
/// Ignored anchors in `sample` are skipped.
pub fn loss_gpn(
    g: &mut Graph,
    cls_rows: DiffArray,
    reg_rows: DiffArray,
    targets: &GpnTargets,
    sample: &[usize],
    lambda: f64,
    smooth: bool,
) -> Result<LossTerm> {
    let mut cls_idx = Vec::new();
    let mut labels = Vec::new();
    let mut reg_idx = Vec::new();
    let mut reg_tgt = Vec::new();
    for &i in sample {
        let label = match targets.labels[i] {
            AnchorLabel::Positive => 1,
            AnchorLabel::Negative => 0,
            AnchorLabel::Ignore => continue,
        };
        cls_idx.extend([2 * i, 2 * i + 1]);
        labels.push(label);
        if let Some(d) = targets.deltas[i] {
            reg_idx.extend(4 * i..4 * i + 4);
            reg_tgt.extend(d);
        }
    }
    if labels.is_empty() {
        return Err(DetectorError::NoSampledAnchors);
    }
    let logits = g.gather(cls_rows, cls_idx, &[labels.len(), 2])?;
    let ce = g.softmax_cross_entropy(logits, &labels)?;
    let cls = g.value(ce).item();
    match gated_regression(g, reg_rows, reg_idx, reg_tgt, lambda, smooth)? {
        Some((term, reg)) => Ok(LossTerm {
            total: g.add(ce, term)?,
            cls,
            reg,
        }),
        None => Ok(LossTerm {
            total: ce,
            cls,
            reg: 0.0,
        }),
    }
}

/// Head loss over the sampled ROIs: cross-entropy over the non-grasp and
/// orientation classes plus `lambda2` times L1 on the labeled class's deltas
/// for ROIs not labeled non-grasp.
///
/// `cls_rows` is (N, C) and `reg_rows` is (N, 4C).
pub fn loss_gcr(
    g: &mut Graph,
    cls_rows: DiffArray,
    reg_rows: DiffArray,
    targets: &HeadTargets,
    lambda2: f64,
    smooth: bool,
) -> Result<LossTerm> {
    let n = targets.classes.len();
    if n == 0 {
        return Err(DetectorError::NoSampledRois);
    }
    let classes = g.shape(cls_rows).get(1).copied().unwrap_or(0);
    let ce = g.softmax_cross_entropy(cls_rows, &targets.classes)?;
    let cls = g.value(ce).item();
    let mut reg_idx = Vec::new();
    let mut reg_tgt = Vec::new();
    for (r, (&c, d)) in targets.classes.iter().zip(&targets.deltas).enumerate() {
        if let (true, Some(d)) = (c != 0, d) {
            let base = r * 4 * classes + 4 * c;
            reg_idx.extend(base..base + 4);
            reg_tgt.extend(d);
        }
    }
    match gated_regression(g, reg_rows, reg_idx, reg_tgt, lambda2, smooth)? {
        Some((term, reg)) => Ok(LossTerm {
            total: g.add(ce, term)?,
            cls,
            reg,
        }),
        None => Ok(LossTerm {
            total: ce,
            cls,
            reg: 0.0,
        }),
    }
}

/// Sum of the two stage losses.
pub fn loss_total(g: &mut Graph, gpn: &LossTerm, gcr: &LossTerm) -> Result<LossTerm> {
    for (name, t) in [("proposal", gpn), ("head", gcr)] {
        let v = t.value(g);
        if !v.is_finite() {
            return Err(DetectorError::NonFiniteLoss(format!("{name} loss is {v}")));
        }
    }
    Ok(LossTerm {
        total: g.add(gpn.total, gcr.total)?,
        cls: gpn.cls + gcr.cls,
        reg: gpn.reg + gcr.reg,
    })
}
