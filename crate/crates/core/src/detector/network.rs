use super::{
    loss_gcr, loss_gpn, loss_total, nms, Detection, DetectorError, GpnPrediction, HeadPrediction,
    NetworkConfig, Result,
};
use crate::augment::{warp_image, Affine2D};
use crate::autodiff::{
    gradient_check, AutodiffError, DiffArray, GradCheckReport, Graph, ParamStore, Tensor,
};
use crate::encoding::{decode_box, generate_anchors, AnchorLabel, GpnTargets, HeadTargets};
use crate::geometry::{AxisAlignedBox, GraspRect};
use crate::ingest::Raster;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Width and height deltas are clamped to this before `exp` so a wild
/// prediction cannot overflow.
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

/// Proposal and detection boxes narrower than this are dropped.
const MIN_BOX_SIDE: f64 = 1.0;

/// Network parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    cfg: NetworkConfig,
    params: ParamStore,
}

/// Handles produced by the backbone and proposal head.
#[derive(Debug, Clone, Copy)]
pub struct GpnOutputs {
    /// Backbone feature map, (1, C, H, W).
    pub feat: DiffArray,
    /// (A, 2) per-anchor logits, column 1 is "grasp".
    pub cls: DiffArray,
    /// (A, 4) per-anchor box deltas.
    pub reg: DiffArray,
    pub feat_h: usize,
    pub feat_w: usize,
}

/// Handles produced by the orientation head.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// (N, R + 1) class logits.
    pub cls: DiffArray,
    /// (N, 4 (R + 1)) per-class deltas.
    pub reg: DiffArray,
}

/// A region of interest and the graspness score it was proposed with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub roi: AxisAlignedBox,
    pub score: f64,
}

enum Init {
    He(usize),
    Normal(f64),
    Zero,
}

fn layout(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (i, &c) in cfg.backbone_widths.iter().enumerate() {
        out.push((format!("backbone.conv{}.w", i + 1), vec![c, c_in, 3, 3], Init::He(9 * c_in)));
        out.push((format!("backbone.conv{}.b", i + 1), vec![c], Init::Zero));
        c_in = c;
    }
    let feat_c = c_in;
    let k = cfg.anchors.per_location();
    let pw = cfg.proposal_width;
    out.push(("gpn.conv.w".into(), vec![pw, feat_c, 3, 3], Init::He(9 * feat_c)));
    out.push(("gpn.conv.b".into(), vec![pw], Init::Zero));
    out.push(("gpn.cls.w".into(), vec![2 * k, pw, 1, 1], Init::Normal(0.01)));
    out.push(("gpn.cls.b".into(), vec![2 * k], Init::Zero));
    out.push(("gpn.reg.w".into(), vec![4 * k, pw, 1, 1], Init::Normal(0.01)));
    out.push(("gpn.reg.b".into(), vec![4 * k], Init::Zero));
    let pooled = feat_c * cfg.roi_grid * cfg.roi_grid;
    let hw = cfg.head_width;
    let classes = cfg.codec.num_classes();
    out.push(("head.fc.w".into(), vec![pooled, hw], Init::He(pooled)));
    out.push(("head.fc.b".into(), vec![hw], Init::Zero));
    out.push(("head.cls.w".into(), vec![hw, classes], Init::Normal(0.01)));
    out.push(("head.cls.b".into(), vec![classes], Init::Zero));
    out.push(("head.reg.w".into(), vec![hw, 4 * classes], Init::Normal(0.001)));
    out.push(("head.reg.b".into(), vec![4 * classes], Init::Zero));
    out
}

// Parameter positions in `layout` order.
const GPN_CONV: usize = 6;
const GPN_CLS: usize = 8;
const GPN_REG: usize = 10;
const HEAD_FC: usize = 12;
const HEAD_CLS: usize = 14;
const HEAD_REG: usize = 16;

fn clamp_deltas(t: &[f64; 4]) -> [f64; 4] {
    [t[0], t[1], t[2].min(MAX_LOG_SCALE), t[3].min(MAX_LOG_SCALE)]
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Converts interleaved bytes of a `size x size` image to a (1, 3, size, size)
/// tensor, subtracting `pixel_mean` and multiplying by `pixel_scale`.
pub fn image_tensor(bytes: &[u8], size: usize, cfg: &NetworkConfig) -> Result<Tensor> {
    if bytes.len() != 3 * size * size {
        return Err(DetectorError::BadInput(format!(
            "{} bytes for a {size}x{size} image",
            bytes.len()
        )));
    }
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in bytes.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = (px[ch] as f64 - cfg.pixel_mean) * cfg.pixel_scale;
        }
    }
    Ok(Tensor::new(vec![1, 3, size, size], data)?)
}

impl Detector {
    /// Fresh network with He-initialized layers, deterministic in `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&cfg) {
            let std = match init {
                Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
                Init::Normal(s) => s,
                Init::Zero => 0.0,
            };
            let t = if std == 0.0 {
                Tensor::zeros(&shape)
            } else {
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&shape, |_| dist.sample(&mut rng))
            };
            params.push(name, t);
        }
        Ok(Self { cfg, params })
    }

    /// Wraps loaded parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: NetworkConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let want = layout(&cfg);
        if want.len() != params.len() {
            return Err(DetectorError::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in
            want.iter().zip(params.names().iter().zip(params.tensors()))
        {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(DetectorError::IncompatibleCheckpoint(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Records every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<DiffArray> {
        self.params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.parameter(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Rescales `img` to the network input, returning its bytes and the
    /// factor applied to source coordinates.
    pub fn fit_input<I: Raster>(&self, img: &I) -> Result<(Vec<u8>, f64)> {
        let size = self.cfg.input_size;
        if img.width() == size && img.height() == size {
            return Ok((img.data().to_vec(), 1.0));
        }
        let s = size as f64 / img.width().max(img.height()) as f64;
        let warped = warp_image(img, &Affine2D::scale(s), size, size)?;
        Ok((warped.data().to_vec(), s))
    }

    /// Backbone and proposal head on a (1, 3, S, S) input.
    pub fn forward_gpn(&self, g: &mut Graph, p: &[DiffArray], input: DiffArray) -> Result<GpnOutputs> {
        let mut x = input;
        for layer in 0..3 {
            x = g.conv2d(x, p[2 * layer], Some(p[2 * layer + 1]), 2, 1)?;
            x = g.relu(x)?;
        }
        let feat = g.max_pool2(x)?;
        let fs = g.shape(feat).to_vec();
        let (fh, fw) = (fs[2], fs[3]);
        let hidden = g.conv2d(feat, p[GPN_CONV], Some(p[GPN_CONV + 1]), 1, 1)?;
        let hidden = g.relu(hidden)?;
        let cls_map = g.conv2d(hidden, p[GPN_CLS], Some(p[GPN_CLS + 1]), 1, 0)?;
        let reg_map = g.conv2d(hidden, p[GPN_REG], Some(p[GPN_REG + 1]), 1, 0)?;
        let k = self.cfg.anchors.per_location();
        let a = fh * fw * k;
        let rows = |width: usize| -> Vec<usize> {
            let mut idx = Vec::with_capacity(a * width);
            for y in 0..fh {
                for xx in 0..fw {
                    for anchor in 0..k {
                        for c in 0..width {
                            let ch = width * anchor + c;
                            idx.push((ch * fh + y) * fw + xx);
                        }
                    }
                }
            }
            idx
        };
        let cls = g.gather(cls_map, rows(2), &[a, 2])?;
        let reg = g.gather(reg_map, rows(4), &[a, 4])?;
        Ok(GpnOutputs {
            feat,
            cls,
            reg,
            feat_h: fh,
            feat_w: fw,
        })
    }

    /// ROI pooling and the orientation head.
    pub fn forward_head(
        &self,
        g: &mut Graph,
        p: &[DiffArray],
        feat: DiffArray,
        rois: &[AxisAlignedBox],
    ) -> Result<HeadOutputs> {
        let grid = self.cfg.roi_grid;
        let pooled = g.roi_pool(feat, rois, grid, grid, 1.0 / self.cfg.feature_stride as f64)?;
        let hidden = g.affine(pooled, p[HEAD_FC], Some(p[HEAD_FC + 1]))?;
        let hidden = g.relu(hidden)?;
        let cls = g.affine(hidden, p[HEAD_CLS], Some(p[HEAD_CLS + 1]))?;
        let reg = g.affine(hidden, p[HEAD_REG], Some(p[HEAD_REG + 1]))?;
        Ok(HeadOutputs { cls, reg })
    }

    /// Anchors for a `feat_w x feat_h` map, clipped to the input frame.
    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<AxisAlignedBox> {
        let s = self.cfg.input_size as f64;
        generate_anchors(feat_w, feat_h, &self.cfg.anchors)
            .iter()
            .map(|a| a.clip(s, s))
            .collect()
    }

    pub fn gpn_prediction(g: &Graph, out: &GpnOutputs) -> GpnPrediction {
        let probs = g
            .value(out.cls)
            .data()
            .chunks_exact(2)
            .map(|r| softmax(r)[1])
            .collect();
        let deltas = g
            .value(out.reg)
            .data()
            .chunks_exact(4)
            .map(|d| [d[0], d[1], d[2], d[3]])
            .collect();
        GpnPrediction { probs, deltas }
    }

    pub fn head_prediction(&self, g: &Graph, out: &HeadOutputs) -> HeadPrediction {
        let c = self.cfg.codec.num_classes();
        let probs = g.value(out.cls).data().chunks_exact(c).map(softmax).collect();
        let deltas = g
            .value(out.reg)
            .data()
            .chunks_exact(4 * c)
            .map(|row| row.chunks_exact(4).map(|d| [d[0], d[1], d[2], d[3]]).collect())
            .collect();
        HeadPrediction { probs, deltas }
    }

    /// Decodes, clips and ranks anchor predictions, then keeps the top
    /// `post_nms_k` survivors of non-maximum suppression.
    pub fn propose(
        &self,
        pred: &GpnPrediction,
        anchors: &[AxisAlignedBox],
        post_nms_k: usize,
    ) -> Vec<Proposal> {
        let s = self.cfg.input_size as f64;
        let mut cands: Vec<Proposal> = anchors
            .iter()
            .zip(pred.probs.iter().zip(&pred.deltas))
            .map(|(a, (&score, d))| Proposal {
                roi: decode_box(a, &clamp_deltas(d)).clip(s, s),
                score,
            })
            .filter(|p| p.roi.bw >= MIN_BOX_SIDE && p.roi.bh >= MIN_BOX_SIDE)
            .collect();
        // stable sort keeps anchor order among equal scores
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(self.cfg.pre_nms_top_k);
        let boxes: Vec<AxisAlignedBox> = cands.iter().map(|p| p.roi).collect();
        let scores: Vec<f64> = cands.iter().map(|p| p.score).collect();
        nms(&boxes, &scores, self.cfg.proposal_nms_iou)
            .into_iter()
            .take(post_nms_k)
            .map(|i| cands[i])
            .collect()
    }

    /// Proposals and head outputs for a prepared input tensor.
    pub fn infer(&self, input: Tensor) -> Result<(Vec<Proposal>, HeadPrediction)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.forward_gpn(&mut g, &p, x)?;
        let anchors = self.anchors(out.feat_h, out.feat_w);
        let proposals = self.propose(
            &Self::gpn_prediction(&g, &out),
            &anchors,
            self.cfg.post_nms_top_k_infer,
        );
        if proposals.is_empty() {
            return Ok((proposals, HeadPrediction { probs: vec![], deltas: vec![] }));
        }
        let rois: Vec<AxisAlignedBox> = proposals.iter().map(|p| p.roi).collect();
        let head = self.forward_head(&mut g, &p, out.feat, &rois)?;
        let pred = self.head_prediction(&g, &head);
        Ok((proposals, pred))
    }

    /// Grasps in `img`, best first.
    ///
    /// Each proposal takes its most probable class; proposals won by the
    /// non-grasp class are rejected. Survivors below `score_thresh` are
    /// dropped, overlapping ones suppressed, and at most `max_out` returned.
    /// Reset boxes of the returned grasps lie inside the image.
    pub fn detect<I: Raster>(&self, img: &I, score_thresh: f64, max_out: usize) -> Result<Vec<Detection>> {
        let size = self.cfg.input_size;
        let (bytes, scale) = self.fit_input(img)?;
        let (proposals, pred) = self.infer(image_tensor(&bytes, size, &self.cfg)?)?;
        let s = size as f64;
        let mut boxes = Vec::new();
        let mut found = Vec::new();
        for (i, prop) in proposals.iter().enumerate() {
            let probs = &pred.probs[i];
            let (class, &score) = probs
                .iter()
                .enumerate()
                .fold((0, &probs[0]), |best, (c, v)| if *v > *best.1 { (c, v) } else { best });
            if class == 0 || score < score_thresh {
                continue;
            }
            let b = decode_box(&prop.roi, &clamp_deltas(&pred.deltas[i][class])).clip(s, s);
            if b.bw < MIN_BOX_SIDE || b.bh < MIN_BOX_SIDE {
                continue;
            }
            boxes.push(b);
            found.push((score, class));
        }
        let scores: Vec<f64> = found.iter().map(|f| f.0).collect();
        let (w, h) = (img.width() as f64, img.height() as f64);
        let mut out = Vec::new();
        for i in nms(&boxes, &scores, self.cfg.detection_nms_iou).into_iter().take(max_out) {
            let b = boxes[i];
            let b = AxisAlignedBox::new(b.cx / scale, b.cy / scale, b.bw / scale, b.bh / scale).clip(w, h);
            let (score, class) = found[i];
            let theta = self.cfg.codec.class_to_angle(class)?;
            let rect = GraspRect::new(b.cx, b.cy, theta, b.bw, b.bh)
                .map_err(|e| DetectorError::BadInput(e.to_string()))?;
            out.push(Detection { rect, score, class });
        }
        Ok(out)
    }
}

/// Finite-difference check of the total loss with respect to every
/// parameter of a miniature network: a 16x16 input, a 1x1 feature map with two
/// anchors, two ROIs and a three-class head.
pub fn micro_network_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let cfg = NetworkConfig {
        input_size: 32,
        backbone_widths: vec![2, 3, 2],
        proposal_width: 3,
        head_width: 3,
        roi_grid: 2,
        anchors: crate::encoding::AnchorConfig {
            stride: 16.0,
            scales: vec![1.0, 2.0],
            ratios: vec![1.0],
        },
        codec: crate::encoding::AngleCodec::new(2),
        lambda: 0.7,
        lambda2: 1.3,
        ..Default::default()
    };
    let det = Detector::new(cfg, seed)?;
    // perturb every parameter so biases are not all zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let dist = Normal::new(0.0, 0.3).expect("positive std");
    let params: Vec<Tensor> = det
        .params()
        .tensors()
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + dist.sample(&mut rng)))
        .collect();
    let input = Tensor::from_fn(&[1, 3, 16, 16], |_| dist.sample(&mut rng) * 3.0);
    let gpn_targets = GpnTargets {
        labels: vec![AnchorLabel::Positive, AnchorLabel::Negative],
        deltas: vec![Some([0.1, -0.2, 0.05, 0.3]), None],
    };
    let rois = [
        AxisAlignedBox::from_corners(0.0, 0.0, 12.0, 10.0),
        AxisAlignedBox::from_corners(4.0, 2.0, 16.0, 15.0),
    ];
    let head_targets = HeadTargets {
        classes: vec![2, 0],
        deltas: vec![Some([-0.3, 0.2, 0.1, -0.1]), None],
    };
    let smooth = det.cfg.smooth_l1;
    let report = gradient_check(
        |g, p| {
            let x = g.constant(input.clone());
            let out = det.forward_gpn(g, p, x).map_err(autodiff_only)?;
            let l_gpn = loss_gpn(g, out.cls, out.reg, &gpn_targets, &[0, 1], det.cfg.lambda, smooth)
                .map_err(autodiff_only)?;
            let head = det.forward_head(g, p, out.feat, &rois).map_err(autodiff_only)?;
            let l_gcr = loss_gcr(g, head.cls, head.reg, &head_targets, det.cfg.lambda2, smooth)
                .map_err(autodiff_only)?;
            Ok(loss_total(g, &l_gpn, &l_gcr).map_err(autodiff_only)?.total)
        },
        &params,
        1e-5,
    )?;
    Ok(report)
}

fn autodiff_only(e: DetectorError) -> AutodiffError {
    match e {
        DetectorError::Autodiff(e) => e,
        other => AutodiffError::ShapeMismatch(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RgdImage;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            input_size: 64,
            backbone_widths: vec![4, 4, 4],
            proposal_width: 8,
            head_width: 8,
            roi_grid: 2,
            ..Default::default()
        }
    }

    #[test]
    fn micro_network_gradients_agree() {
        for seed in 0..3 {
            let r = micro_network_gradcheck(seed).unwrap();
            assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn default_feature_map_is_14x14() {
        let det = Detector::new(NetworkConfig::default(), 0).unwrap();
        let mut g = Graph::new();
        let p = det.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 227, 227]));
        let out = det.forward_gpn(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out.feat), &[1, 32, 14, 14]);
        assert_eq!(g.shape(out.cls), &[14 * 14 * 9, 2]);
        assert!(g.value(out.reg).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Detector::new(small_cfg(), 7).unwrap();
        let b = Detector::new(small_cfg(), 7).unwrap();
        let c = Detector::new(small_cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_shapes_are_checked() {
        let det = Detector::new(small_cfg(), 0).unwrap();
        let params = det.params().clone();
        let other = NetworkConfig {
            head_width: 9,
            ..small_cfg()
        };
        assert!(matches!(
            Detector::from_params(other, params.clone()),
            Err(DetectorError::IncompatibleCheckpoint(_))
        ));
        assert_eq!(Detector::from_params(small_cfg(), params).unwrap(), det);
    }

    #[test]
    fn gpn_rows_follow_anchor_order() {
        let det = Detector::new(small_cfg(), 1).unwrap();
        let mut g = Graph::new();
        let p = det.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 37) % 11) as f64 * 0.1));
        let out = det.forward_gpn(&mut g, &p, x).unwrap();
        // direct 1x1 conv output for anchor 5 at (y=1, x=2), column 1
        let k = 9;
        let (fh, fw) = (out.feat_h, out.feat_w);
        let mut g2 = Graph::new();
        let p2 = det.bind(&mut g2, false);
        let x2 = g2.constant(g.value(x).clone());
        let feat = det.forward_gpn(&mut g2, &p2, x2).unwrap().feat;
        let hidden = g2.conv2d(feat, p2[GPN_CONV], Some(p2[GPN_CONV + 1]), 1, 1).unwrap();
        let hidden = g2.relu(hidden).unwrap();
        let map = g2.conv2d(hidden, p2[GPN_CLS], Some(p2[GPN_CLS + 1]), 1, 0).unwrap();
        let (y, xx, a) = (1, 2, 5);
        let want = g2.value(map).data()[((2 * a + 1) * fh + y) * fw + xx];
        let row = (y * fw + xx) * k + a;
        assert_eq!(g.value(out.cls).data()[2 * row + 1], want);
    }

    #[test]
    fn untrained_proposals_are_bounded() {
        let det = Detector::new(NetworkConfig::default(), 3).unwrap();
        let img = RgdImage::new(227, 227, (0..227 * 227 * 3).map(|i| (i % 253) as u8).collect()).unwrap();
        let (bytes, _) = det.fit_input(&img).unwrap();
        let (props, pred) = det.infer(image_tensor(&bytes, 227, det.config()).unwrap()).unwrap();
        assert_eq!(props.len(), det.config().post_nms_top_k_infer);
        assert_eq!(pred.probs.len(), props.len());
        for p in &props {
            let (x1, y1, x2, y2) = p.roi.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 227.0 && y2 <= 227.0);
        }
        for w in props.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for row in &pred.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detections_respect_invariants() {
        let det = Detector::new(small_cfg(), 5).unwrap();
        let img = RgdImage::new(80, 50, (0..80 * 50 * 3).map(|i| (i * 13 % 256) as u8).collect()).unwrap();
        let dets = det.detect(&img, 0.0, 10).unwrap();
        for d in &dets {
            assert_ne!(d.class, 0);
            let (x1, y1, x2, y2) = AxisAlignedBox::new(d.rect.x, d.rect.y, d.rect.w, d.rect.h).corners();
            assert!(x1 >= -1e-9 && y1 >= -1e-9 && x2 <= 80.0 + 1e-9 && y2 <= 50.0 + 1e-9);
        }
        for w in dets.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }
}
