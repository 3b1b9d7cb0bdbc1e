use super::{
    image_tensor, loss_gcr, loss_gpn, loss_total, Detection, Detector, DetectorError, InputMode,
    Result,
};
use crate::autodiff::{AutodiffError, Graph, LrSchedule, Sgd, Tensor};
use crate::encoding::{label_anchors, label_rois, GpnTargets, HeadTargets};
use crate::geometry::{
    is_correct, reset_to_axis_aligned, AxisAlignedBox, GraspRect, DEFAULT_ANGLE_THRESHOLD,
    DEFAULT_JACCARD_THRESHOLD,
};
use crate::ingest::DatasetSample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Measure top-1 success on the training set after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            lr: LrSchedule {
                base: 1e-2,
                ..LrSchedule::default()
            },
            momentum: 0.0,
            eval_each_epoch: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub loss_gpn: f64,
    pub loss_gcr: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Top-1 success on the training set, when measured.
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainReport {
    pub iterations: Vec<IterationMetrics>,
    pub epochs: Vec<EpochSummary>,
    /// Samples without any positive grasp, which cannot be trained on.
    pub skipped_samples: usize,
}

fn take_shuffled<R: Rng>(mut pool: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

/// Up to `batch` labeled anchors with at most `positive_fraction` of them
/// positive; the rest are negatives. Returned in ascending order.
pub fn sample_anchors<R: Rng>(
    targets: &GpnTargets,
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let max_pos = (batch as f64 * positive_fraction).floor() as usize;
    let mut out = take_shuffled(targets.positives().collect(), max_pos, rng);
    let rest = batch - out.len();
    out.extend(take_shuffled(targets.negatives().collect(), rest, rng));
    out.sort_unstable();
    out
}

/// Up to `batch` ROIs with at most `foreground_fraction` of them labeled with
/// an orientation class. Returned in ascending order.
pub fn sample_rois<R: Rng>(
    targets: &HeadTargets,
    batch: usize,
    foreground_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let max_fg = (batch as f64 * foreground_fraction).floor() as usize;
    let mut out = take_shuffled(targets.foreground().collect(), max_fg, rng);
    let rest = batch - out.len();
    let bg = (0..targets.classes.len()).filter(|&i| targets.classes[i] == 0).collect();
    out.extend(take_shuffled(bg, rest, rng));
    out.sort_unstable();
    out
}

/// Network input bytes for a sample and its positives in input coordinates.
fn prepare(det: &Detector, s: &DatasetSample) -> Result<(Vec<u8>, Vec<GraspRect>)> {
    let (bytes, scale) = match det.config().input_mode {
        InputMode::Rgd => det.fit_input(&s.rgd)?,
        InputMode::Rgb => det.fit_input(s.rgb.as_ref().ok_or_else(|| {
            DetectorError::BadInput(format!("{} has no color image", s.source_id))
        })?)?,
    };
    let gts = s
        .positives
        .iter()
        .map(|r| GraspRect {
            x: r.x * scale,
            y: r.y * scale,
            w: r.w * scale,
            h: r.h * scale,
            ..*r
        })
        .collect();
    Ok((bytes, gts))
}

impl Detector {
    /// Detections for a sample, fed according to the configured input mode.
    pub fn detect_sample(&self, s: &DatasetSample, score_thresh: f64, max_out: usize) -> Result<Vec<Detection>> {
        match self.config().input_mode {
            InputMode::Rgd => self.detect(&s.rgd, score_thresh, max_out),
            InputMode::Rgb => self.detect(
                s.rgb.as_ref().ok_or_else(|| {
                    DetectorError::BadInput(format!("{} has no color image", s.source_id))
                })?,
                score_thresh,
                max_out,
            ),
        }
    }

    /// One forward/backward pass on a single image. Returns the loss values
    /// and the gradient of every parameter.
    pub fn training_step<R: Rng>(
        &self,
        bytes: &[u8],
        gts: &[GraspRect],
        rng: &mut R,
    ) -> Result<((f64, f64, f64), Vec<Tensor>)> {
        let cfg = self.config();
        let size = cfg.input_size as f64;
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let x = g.constant(image_tensor(bytes, cfg.input_size, cfg)?);
        let out = self.forward_gpn(&mut g, &p, x)?;
        let anchors = self.anchors(out.feat_h, out.feat_w);
        let resets: Vec<AxisAlignedBox> = gts
            .iter()
            .map(|r| reset_to_axis_aligned(r).clip(size, size))
            .collect();
        let gpn_targets = label_anchors(&anchors, &resets, cfg.anchor_pos_iou, cfg.anchor_neg_iou)?;
        let anchor_sample = sample_anchors(&gpn_targets, cfg.anchor_batch, cfg.anchor_positive_fraction, rng);
        let l_gpn = loss_gpn(
            &mut g,
            out.cls,
            out.reg,
            &gpn_targets,
            &anchor_sample,
            cfg.lambda,
            cfg.smooth_l1,
        )?;

        let mut rois: Vec<AxisAlignedBox> = self
            .propose(&Self::gpn_prediction(&g, &out), &anchors, cfg.post_nms_top_k_train)
            .iter()
            .map(|p| p.roi)
            .collect();
        rois.extend(resets.iter().filter(|b| b.bw >= 1.0 && b.bh >= 1.0));
        let head_all = label_rois(&rois, gts, cfg.roi_fg_iou, &cfg.codec)?;
        let picked = sample_rois(&head_all, cfg.roi_batch, cfg.roi_foreground_fraction, rng);
        let picked_rois: Vec<AxisAlignedBox> = picked.iter().map(|&i| rois[i]).collect();
        let head_targets = HeadTargets {
            classes: picked.iter().map(|&i| head_all.classes[i]).collect(),
            deltas: picked.iter().map(|&i| head_all.deltas[i]).collect(),
        };
        if picked_rois.is_empty() {
            return Err(DetectorError::NoSampledRois);
        }
        let head = self.forward_head(&mut g, &p, out.feat, &picked_rois)?;
        let l_gcr = loss_gcr(&mut g, head.cls, head.reg, &head_targets, cfg.lambda2, cfg.smooth_l1)?;
        let total = loss_total(&mut g, &l_gpn, &l_gcr)?;
        g.backward(total.total)?;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(self.params().tensors())
            .map(|(h, t)| g.grad(*h).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(DetectorError::NonFiniteLoss("non-finite gradient".into()));
        }
        Ok(((l_gpn.value(&g), l_gcr.value(&g), total.value(&g)), grads))
    }

    /// Trains in place with SGD, one image per iteration, visiting the
    /// dataset in a seeded random order each epoch. `on_iteration` sees every
    /// iteration's metrics as they are produced.
    ///
    /// Parameters are rounded to single precision at the end so the trained
    /// network is exactly what its checkpoint stores.
    pub fn train(
        &mut self,
        data: &[DatasetSample],
        cfg: &TrainConfig,
        mut on_iteration: impl FnMut(&IterationMetrics),
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(DetectorError::EmptyDataset);
        }
        let mut prepared = Vec::with_capacity(data.len());
        let mut report = TrainReport::default();
        for s in data {
            let (bytes, gts) = prepare(self, s)?;
            if gts.is_empty() {
                report.skipped_samples += 1;
            } else {
                prepared.push((bytes, gts));
            }
        }
        if prepared.is_empty() {
            return Err(DetectorError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Sgd::new(cfg.lr, cfg.momentum);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for &i in &order {
                let (bytes, gts) = &prepared[i];
                let ((l_gpn, l_gcr, l_total), grads) =
                    self.training_step(bytes, gts, &mut rng).map_err(|e| match e {
                        DetectorError::Autodiff(AutodiffError::NonFinite(op)) => {
                            DetectorError::NonFiniteLoss(format!(
                                "{op} produced a non-finite value at epoch {epoch}, iteration {}",
                                opt.iteration()
                            ))
                        }
                        other => other,
                    })?;
                let iteration = opt.iteration();
                let lr = opt.step(self.params_mut().tensors_mut(), &grads)?;
                let m = IterationMetrics {
                    epoch,
                    iteration,
                    lr,
                    loss_gpn: l_gpn,
                    loss_gcr: l_gcr,
                    loss_total: l_total,
                };
                on_iteration(&m);
                report.iterations.push(m);
                sum += l_total;
            }
            let top1 = if cfg.eval_each_epoch {
                Some(evaluate_top1(self, data)?)
            } else {
                None
            };
            report.epochs.push(EpochSummary {
                epoch,
                mean_loss: sum / order.len() as f64,
                top1,
            });
        }
        self.params_mut().round_to_f32();
        Ok(report)
    }
}

/// Fraction of samples whose highest-scoring detection is correct against
/// any of their positives, at the default Jaccard and angle thresholds.
pub fn evaluate_top1(det: &Detector, data: &[DatasetSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let mut hits = 0;
    for s in data {
        let top = det.detect_sample(s, 0.0, 1)?;
        if let Some(d) = top.first() {
            if s.positives.iter().any(|gt| {
                is_correct(&d.rect, gt, DEFAULT_JACCARD_THRESHOLD, DEFAULT_ANGLE_THRESHOLD)
            }) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::AnchorLabel::{self, Ignore, Negative, Positive};

    #[test]
    fn anchor_sampling_caps_positives() {
        let mut labels = vec![Positive; 10];
        labels.extend(vec![Negative; 300]);
        labels.extend(vec![Ignore; 5]);
        let t = GpnTargets {
            deltas: labels.iter().map(|l| (*l == Positive).then_some([0.0; 4])).collect(),
            labels,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_anchors(&t, 16, 0.5, &mut rng);
        assert_eq!(s.len(), 16);
        assert_eq!(s.iter().filter(|&&i| t.labels[i] == AnchorLabel::Positive).count(), 8);
        let s = sample_anchors(&t, 256, 0.5, &mut rng);
        assert_eq!(s.len(), 256);
        assert_eq!(s.iter().filter(|&&i| t.labels[i] == AnchorLabel::Positive).count(), 10);
        assert!(s.iter().all(|&i| t.labels[i] != AnchorLabel::Ignore));
    }

    #[test]
    fn roi_sampling_caps_foreground() {
        let t = HeadTargets {
            classes: (0..100).map(|i| if i < 40 { 3 } else { 0 }).collect(),
            deltas: (0..100).map(|i| (i < 40).then_some([0.0; 4])).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_rois(&t, 64, 0.25, &mut rng);
        assert_eq!(s.len(), 64);
        assert_eq!(s.iter().filter(|&&i| t.classes[i] != 0).count(), 16);
    }
}
