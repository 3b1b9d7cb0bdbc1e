//! The two-stage grasp detector: a small convolutional backbone, a grasp
//! proposal head scoring anchors, ROI pooling and a head that classifies each
//! proposal into an orientation class (or "no grasp") and refines its box.

mod loss;
mod network;
mod nms;
pub mod synth;
mod train;

pub use loss::{loss_gcr, loss_gpn, loss_total, LossTerm};
pub use network::{image_tensor, micro_network_gradcheck, Detector, GpnOutputs, HeadOutputs, Proposal};
pub use nms::nms;
pub use train::{
    evaluate_top1, sample_anchors, sample_rois, EpochSummary, IterationMetrics, TrainConfig,
    TrainReport,
};

use crate::augment::AugmentError;
use crate::autodiff::AutodiffError;
use crate::encoding::{AnchorConfig, AngleCodec, EncodingError};
use crate::geometry::GraspRect;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("no anchors were sampled for the proposal loss")]
    NoSampledAnchors,
    #[error("no regions were sampled for the head loss")]
    NoSampledRois,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("checkpoint does not match the network: {0}")]
    IncompatibleCheckpoint(String),
    #[error("input image: {0}")]
    BadInput(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// Which three channels feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[default]
    Rgd,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square input side in pixels; other images are rescaled to fit.
    pub input_size: usize,
    /// Output channels of the three stride-2 backbone convolutions.
    pub backbone_widths: Vec<usize>,
    /// Total downsampling of the backbone (three stride-2 convs and a 2x2 pool).
    pub feature_stride: usize,
    /// Width of the shared 3x3 layer in front of the proposal heads.
    pub proposal_width: usize,
    /// Width of the fully connected layer after ROI pooling.
    pub head_width: usize,
    /// ROI pooling output grid side.
    pub roi_grid: usize,
    pub anchors: AnchorConfig,
    pub codec: AngleCodec,
    /// Weight of the proposal regression term.
    pub lambda: f64,
    /// Weight of the orientation head regression term.
    pub lambda2: f64,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k_train: usize,
    pub post_nms_top_k_infer: usize,
    pub proposal_nms_iou: f64,
    pub detection_nms_iou: f64,
    pub anchor_batch: usize,
    /// Largest fraction of the anchor batch that may be positive.
    pub anchor_positive_fraction: f64,
    pub roi_batch: usize,
    /// Largest fraction of the ROI batch that may be foreground.
    pub roi_foreground_fraction: f64,
    pub anchor_pos_iou: f64,
    pub anchor_neg_iou: f64,
    pub roi_fg_iou: f64,
    pub input_mode: InputMode,
    /// Subtracted from every input byte.
    pub pixel_mean: f64,
    /// Multiplies the mean-subtracted input.
    pub pixel_scale: f64,
    /// Smooth L1 instead of plain L1 for both regression terms.
    pub smooth_l1: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 227,
            backbone_widths: vec![16, 32, 32],
            feature_stride: 16,
            proposal_width: 128,
            head_width: 128,
            roi_grid: 7,
            anchors: AnchorConfig::default(),
            codec: AngleCodec::default(),
            lambda: 1.0,
            lambda2: 1.0,
            pre_nms_top_k: 300,
            post_nms_top_k_train: 64,
            post_nms_top_k_infer: 32,
            proposal_nms_iou: 0.7,
            detection_nms_iou: 0.5,
            anchor_batch: 256,
            anchor_positive_fraction: 0.5,
            roi_batch: 64,
            roi_foreground_fraction: 0.25,
            anchor_pos_iou: 0.7,
            anchor_neg_iou: 0.3,
            roi_fg_iou: 0.5,
            input_mode: InputMode::Rgd,
            pixel_mean: 144.0,
            pixel_scale: 1.0 / 128.0,
            smooth_l1: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if self.backbone_widths.len() != 3 || self.backbone_widths.contains(&0) {
            return bad("backbone_widths must hold three positive widths");
        }
        if self.proposal_width == 0 || self.head_width == 0 || self.roi_grid == 0 {
            return bad("layer widths and roi_grid must be positive");
        }
        if self.feature_stride != 16 {
            return bad("feature_stride is fixed by the backbone at 16");
        }
        if self.input_size < 32 {
            return bad("input_size must be at least 32");
        }
        if !(self.lambda >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda and lambda2 must be non-negative");
        }
        if self.anchors.per_location() == 0
            || self.anchors.scales.iter().chain(&self.anchors.ratios).any(|v| !(*v > 0.0))
        {
            return bad("anchor scales and ratios must be positive and non-empty");
        }
        if self.anchors.stride != self.feature_stride as f64 {
            return bad("anchor stride must equal feature_stride");
        }
        if self.codec.bins == 0 {
            return bad("codec needs at least one bin");
        }
        if self.anchor_batch == 0 || self.roi_batch == 0 {
            return bad("batch sizes must be positive");
        }
        for (name, v) in [
            ("anchor_positive_fraction", self.anchor_positive_fraction),
            ("roi_foreground_fraction", self.roi_foreground_fraction),
            ("proposal_nms_iou", self.proposal_nms_iou),
            ("detection_nms_iou", self.detection_nms_iou),
            ("anchor_pos_iou", self.anchor_pos_iou),
            ("anchor_neg_iou", self.anchor_neg_iou),
            ("roi_fg_iou", self.roi_fg_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.anchor_neg_iou > self.anchor_pos_iou {
            return bad("anchor_neg_iou must not exceed anchor_pos_iou");
        }
        if !(self.pixel_scale.is_finite() && self.pixel_scale > 0.0 && self.pixel_mean.is_finite()) {
            return bad("pixel_mean and pixel_scale must be finite, pixel_scale positive");
        }
        Ok(())
    }

    /// Side of the backbone feature map for the configured input.
    pub fn feature_size(&self) -> usize {
        let conv = |n: usize| (n + 2 - 3) / 2 + 1;
        conv(conv(conv(self.input_size))) / 2
    }
}

/// Proposal-stage outputs for every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct GpnPrediction {
    /// Graspness probability per anchor.
    pub probs: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

/// Orientation head outputs for every ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPrediction {
    /// Softmax over the non-grasp class and the orientation classes.
    pub probs: Vec<Vec<f64>>,
    /// Box deltas per class, `deltas[roi][class]`.
    pub deltas: Vec<Vec<[f64; 4]>>,
}

/// A scored grasp found by [`Detector::detect`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: GraspRect,
    pub score: f64,
    /// Orientation class, never 0.
    pub class: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_size(), 14);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = NetworkConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.lambda = 1.0;
        cfg.backbone_widths = vec![16, 0, 32];
        assert!(cfg.validate().is_err());
    }
}
