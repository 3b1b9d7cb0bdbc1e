//! Orientation classes, anchor grids and box delta targets for the two
//! network stages.

use crate::geometry::{normalize_angle, reset_to_axis_aligned, AxisAlignedBox, GraspRect};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("class 0 is the non-grasp class and has no angle")]
    NullClassHasNoAngle,
    #[error("class {class} outside 1..={max}")]
    ClassOutOfRange { class: usize, max: usize },
    #[error("no ground truth boxes to match against")]
    EmptyGroundTruth,
    #[error("no regions of interest")]
    EmptyRois,
}

/// Quantizes grasp angles into `bins` equal intervals over `[0, 180)`.
/// Class 0 is reserved for "not a grasp", so there are `bins + 1` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleCodec {
    pub bins: usize,
}

impl Default for AngleCodec {
    fn default() -> Self {
        Self { bins: 19 }
    }
}

impl AngleCodec {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 1, "angle codec needs at least one bin");
        Self { bins }
    }

    pub fn num_classes(&self) -> usize {
        self.bins + 1
    }

    pub fn bin_width(&self) -> f64 {
        180.0 / self.bins as f64
    }

    /// Class in `1..=bins` whose half-open interval holds `theta`.
    pub fn quantize(&self, theta: f64) -> usize {
        let t = normalize_angle(theta);
        let mut i = (t / self.bin_width()).floor() as usize;
        // floor of the division can land one bin low or high at exact edges
        if i > 0 && t < i as f64 * self.bin_width() {
            i -= 1;
        }
        if i + 1 < self.bins && t >= (i + 1) as f64 * self.bin_width() {
            i += 1;
        }
        i.min(self.bins - 1) + 1
    }

    /// The `[lo, hi)` interval covered by class `l`.
    pub fn bin_bounds(&self, class: usize) -> Result<(f64, f64), EncodingError> {
        self.check_class(class)?;
        let w = self.bin_width();
        Ok(((class - 1) as f64 * w, class as f64 * w))
    }

    /// Centroid angle of class `l`.
    pub fn class_to_angle(&self, class: usize) -> Result<f64, EncodingError> {
        self.check_class(class)?;
        Ok((class as f64 - 0.5) * self.bin_width())
    }

    fn check_class(&self, class: usize) -> Result<(), EncodingError> {
        match class {
            0 => Err(EncodingError::NullClassHasNoAngle),
            c if c > self.bins => Err(EncodingError::ClassOutOfRange {
                class: c,
                max: self.bins,
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Pixels between neighbouring anchor centers.
    pub stride: f64,
    /// Anchor side length in units of `stride`.
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 16.0,
            scales: vec![1.5, 3.0, 6.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    /// Anchors per feature-map location.
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors for a `feat_w x feat_h` map, ordered row, column, scale, ratio.
pub fn generate_anchors(feat_w: usize, feat_h: usize, cfg: &AnchorConfig) -> Vec<AxisAlignedBox> {
    let mut out = Vec::with_capacity(feat_w * feat_h * cfg.per_location());
    for j in 0..feat_h {
        for i in 0..feat_w {
            let cx = (i as f64 + 0.5) * cfg.stride;
            let cy = (j as f64 + 0.5) * cfg.stride;
            for &s in &cfg.scales {
                let side = s * cfg.stride;
                for &ratio in &cfg.ratios {
                    let root = ratio.sqrt();
                    out.push(AxisAlignedBox::new(cx, cy, side / root, side * root));
                }
            }
        }
    }
    out
}

/// `(dx, dy, dw, dh)` taking `anchor` to `gt`.
pub fn encode_box(anchor: &AxisAlignedBox, gt: &AxisAlignedBox) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.bw,
        (gt.cy - anchor.cy) / anchor.bh,
        (gt.bw / anchor.bw).ln(),
        (gt.bh / anchor.bh).ln(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &AxisAlignedBox, t: &[f64; 4]) -> AxisAlignedBox {
    AxisAlignedBox::new(
        anchor.cx + t[0] * anchor.bw,
        anchor.cy + t[1] * anchor.bh,
        anchor.bw * t[2].exp(),
        anchor.bh * t[3].exp(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Negative,
    Positive,
    Ignore,
}

/// Per-anchor proposal-stage labels and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Present exactly for positive anchors.
    pub deltas: Vec<Option<[f64; 4]>>,
}

impl GpnTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, want: AnchorLabel) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, l)| **l == want)
            .map(|(i, _)| i)
    }
}

/// Labels anchors against axis-aligned ground truth boxes.
///
/// An anchor is positive at IoU >= `pos_iou` with any box, or when it attains
/// the (non-zero) best IoU of some box; negative when its best IoU is below
/// `neg_iou`; ignored otherwise.
pub fn label_anchors(
    anchors: &[AxisAlignedBox],
    gts: &[AxisAlignedBox],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<GpnTargets, EncodingError> {
    if gts.is_empty() {
        return Err(EncodingError::EmptyGroundTruth);
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.iou(g)).collect())
        .collect();
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut labels = vec![AnchorLabel::Ignore; anchors.len()];
    for (i, row) in ious.iter().enumerate() {
        let (best_gt, best) = argmax(row);
        if best >= pos_iou {
            labels[i] = AnchorLabel::Positive;
            assigned[i] = Some(best_gt);
        } else if best < neg_iou {
            labels[i] = AnchorLabel::Negative;
        }
    }
    for g in 0..gts.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[g] == best && labels[i] != AnchorLabel::Positive {
                labels[i] = AnchorLabel::Positive;
                assigned[i] = Some(g);
            }
        }
    }
    let deltas = assigned
        .iter()
        .enumerate()
        .map(|(i, g)| g.map(|g| encode_box(&anchors[i], &gts[g])))
        .collect();
    Ok(GpnTargets { labels, deltas })
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
}

/// Per-ROI head labels: orientation class (0 = non-grasp) and, for grasp
/// classes, the box delta from the ROI to its matched reset box.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub classes: Vec<usize>,
    pub deltas: Vec<Option<[f64; 4]>>,
}

impl HeadTargets {
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0)
            .map(|(i, _)| i)
    }
}

/// Assigns each ROI the orientation class of its best-overlapping ground
/// truth grasp (reset box IoU >= `fg_iou`), else the non-grasp class.
pub fn label_rois(
    rois: &[AxisAlignedBox],
    gts: &[GraspRect],
    fg_iou: f64,
    codec: &AngleCodec,
) -> Result<HeadTargets, EncodingError> {
    if rois.is_empty() {
        return Err(EncodingError::EmptyRois);
    }
    if gts.is_empty() {
        return Err(EncodingError::EmptyGroundTruth);
    }
    let resets: Vec<AxisAlignedBox> = gts.iter().map(reset_to_axis_aligned).collect();
    let mut classes = Vec::with_capacity(rois.len());
    let mut deltas = Vec::with_capacity(rois.len());
    for roi in rois {
        let row: Vec<f64> = resets.iter().map(|g| roi.iou(g)).collect();
        let (g, best) = argmax(&row);
        if best >= fg_iou {
            classes.push(codec.quantize(gts[g].theta));
            deltas.push(Some(encode_box(roi, &resets[g])));
        } else {
            classes.push(0);
            deltas.push(None);
        }
    }
    Ok(HeadTargets { classes, deltas })
}
