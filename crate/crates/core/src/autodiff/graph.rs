use super::gemm::gemm;
use super::{AutodiffError, Result, Tensor};
use crate::geometry::AxisAlignedBox;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiffArray(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Conv2d {
        input: DiffArray,
        kernel: DiffArray,
        bias: Option<DiffArray>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(DiffArray),
    MaxPool2 {
        input: DiffArray,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(DiffArray),
    Affine {
        input: DiffArray,
        weight: DiffArray,
        bias: Option<DiffArray>,
    },
    RoiPool {
        input: DiffArray,
        argmax: Vec<usize>,
    },
    Gather {
        input: DiffArray,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: DiffArray,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        pred: DiffArray,
        target: Vec<f64>,
        smooth: bool,
    },
    Add(DiffArray, DiffArray),
    Scale(DiffArray, f64),
    WeightedSum {
        input: DiffArray,
        weights: Vec<f64>,
    },
    Miswired(DiffArray),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::ShapeMismatch(msg))
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<DiffArray> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Ok(DiffArray(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<DiffArray> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Scale(x, _) | Op::Miswired(x) => vec![*x],
            Op::MaxPool2 { input, .. }
            | Op::RoiPool { input, .. }
            | Op::Gather { input, .. }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::L1 { pred, .. } => vec![*pred],
            Op::Add(a, b) => vec![*a, *b],
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> DiffArray {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: false,
        });
        self.grads.push(None);
        DiffArray(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn parameter(&mut self, t: Tensor) -> DiffArray {
        let id = self.constant(t);
        self.nodes[id.0].needs_grad = true;
        id
    }

    pub fn value(&self, x: DiffArray) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: DiffArray) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    /// Gradient of the last backward's output with respect to `x`, if any
    /// flowed into it.
    pub fn grad(&self, x: DiffArray) -> Option<Tensor> {
        self.grads[x.0].as_ref().map(|g| Tensor {
            shape: self.nodes[x.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    /// Cross-correlation of `input` (N,C,H,W) with `kernel` (O,C,kh,kw).
    pub fn conv2d(
        &mut self,
        input: DiffArray,
        kernel: DiffArray,
        bias: Option<DiffArray>,
        stride: usize,
        pad: usize,
    ) -> Result<DiffArray> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return shape_err(format!("conv2d input {xs:?} kernel {ks:?} stride {stride}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("conv2d kernel {kh}x{kw} larger than padded {h}x{w}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return shape_err(format!("conv2d bias {:?} for {o} filters", self.shape(b)));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![0.0; n * ckk * hw];
        let mut out = vec![0.0; n * o * hw];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for b in 0..n {
                let col = &mut cols[b * ckk * hw..(b + 1) * ckk * hw];
                im2col(&x[b * c * h * w..(b + 1) * c * h * w], &geom, col);
                gemm(o, ckk, hw, k, false, col, false, 0.0, &mut out[b * o * hw..(b + 1) * o * hw]);
            }
            if let Some(bias) = bias {
                let bv = self.value(bias).data();
                for (chunk_i, chunk) in out.chunks_mut(hw).enumerate() {
                    let bval = bv[chunk_i % o];
                    chunk.iter_mut().for_each(|v| *v += bval);
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            value,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: DiffArray) -> Result<DiffArray> {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(Op::Relu(x), out, "relu")
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: DiffArray) -> Result<DiffArray> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return shape_err(format!("max_pool2 on {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if v[i] > v[best] {
                            best = i;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(Op::MaxPool2 { input: x, argmax }, value, "max_pool2")
    }

    /// Mean over the spatial dimensions: (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&mut self, x: DiffArray) -> Result<DiffArray> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return shape_err(format!("global_avg_pool on {s:?}"));
        }
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push(Op::GlobalAvgPool(x), value, "global_avg_pool")
    }

    /// `x W + b` where `x` is read as (N, D) from its leading dimension,
    /// `W` is (D, O) and `b` is (O).
    pub fn affine(
        &mut self,
        x: DiffArray,
        weight: DiffArray,
        bias: Option<DiffArray>,
    ) -> Result<DiffArray> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let n = xs.first().copied().unwrap_or(0);
        let len = self.value(x).len();
        if n == 0 || ws.len() != 2 || len != n * ws[0] {
            return shape_err(format!("affine input {xs:?} weight {ws:?}"));
        }
        let (d, o) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return shape_err(format!("affine bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            out.chunks_mut(o).for_each(|row| row.copy_from_slice(bv));
        }
        gemm(
            n,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            false,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, o], out)?;
        self.push(
            Op::Affine {
                input: x,
                weight,
                bias,
            },
            value,
            "affine",
        )
    }

    /// Max pooling of each region over a `(1, C, H, W)` feature map into an
    /// `out_h x out_w` grid; output is `(R, C, out_h, out_w)`.
    ///
    /// Regions are given in image pixels and mapped to feature cells by
    /// `spatial_scale`. A bin that ends up empty after clipping reads the
    /// single nearest cell.
    pub fn roi_pool(
        &mut self,
        feat: DiffArray,
        rois: &[AxisAlignedBox],
        out_h: usize,
        out_w: usize,
        spatial_scale: f64,
    ) -> Result<DiffArray> {
        let s = self.shape(feat).to_vec();
        if s.len() != 4 || s[0] != 1 || out_h == 0 || out_w == 0 || rois.is_empty() {
            return shape_err(format!(
                "roi_pool on {s:?} with {} rois into {out_h}x{out_w}",
                rois.len()
            ));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let v = self.value(feat).data();
        let mut out = Vec::with_capacity(rois.len() * c * out_h * out_w);
        let mut argmax = Vec::with_capacity(out.capacity());
        for roi in rois {
            let (x1, y1, x2, y2) = roi.corners();
            if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
                return shape_err(format!("non-finite roi {roi:?}"));
            }
            let start_w = (x1 * spatial_scale).floor();
            let start_h = (y1 * spatial_scale).floor();
            let roi_w = ((x2 * spatial_scale).ceil() - start_w).max(1.0);
            let roi_h = ((y2 * spatial_scale).ceil() - start_h).max(1.0);
            let bin_w = roi_w / out_w as f64;
            let bin_h = roi_h / out_h as f64;
            let span = |start: f64, bin: f64, p: usize, limit: usize| -> (usize, usize) {
                let lo = (start + (p as f64 * bin).floor()).clamp(0.0, limit as f64);
                let hi = (start + ((p + 1) as f64 * bin).ceil()).clamp(0.0, limit as f64);
                if hi > lo {
                    (lo as usize, hi as usize)
                } else {
                    let near = lo.min(limit as f64 - 1.0) as usize;
                    (near, near + 1)
                }
            };
            for ch in 0..c {
                let plane = ch * h * w;
                for py in 0..out_h {
                    let (hs, he) = span(start_h, bin_h, py, h);
                    for px in 0..out_w {
                        let (ws, we) = span(start_w, bin_w, px, w);
                        let mut best = plane + hs * w + ws;
                        for yy in hs..he {
                            for xx in ws..we {
                                let i = plane + yy * w + xx;
                                if v[i] > v[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(v[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(vec![rois.len(), c, out_h, out_w], out)?;
        self.push(
            Op::RoiPool {
                input: feat,
                argmax,
            },
            value,
            "roi_pool",
        )
    }

    /// `out.flat[i] = x.flat[indices[i]]`, shaped `shape`. Covers reshapes,
    /// permutations and row selection.
    pub fn gather(&mut self, x: DiffArray, indices: Vec<usize>, shape: &[usize]) -> Result<DiffArray> {
        let len = self.value(x).len();
        if shape.iter().product::<usize>() != indices.len() {
            return shape_err(format!("gather of {} indices into {shape:?}", indices.len()));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return shape_err(format!("gather index {bad} out of {len}"));
        }
        let v = self.value(x).data();
        let out: Vec<f64> = indices.iter().map(|&i| v[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(Op::Gather { input: x, indices }, value, "gather")
    }

    /// Mean over rows of `-log softmax(logits[row])[labels[row]]`; `logits`
    /// is read as (N, C) from its leading dimension.
    pub fn softmax_cross_entropy(&mut self, logits: DiffArray, labels: &[usize]) -> Result<DiffArray> {
        let s = self.shape(logits).to_vec();
        let len = self.value(logits).len();
        let n = labels.len();
        if n == 0 || !len.is_multiple_of(n) || s.first() != Some(&n) {
            return shape_err(format!("cross entropy logits {s:?} for {n} labels"));
        }
        let classes = len / n;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let mut probs = Vec::with_capacity(len);
        let mut total = 0.0;
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            "softmax_cross_entropy",
        )
    }

    /// Mean absolute error against a fixed target (or mean smooth-L1 with
    /// unit transition when `smooth`).
    pub fn l1_loss(&mut self, pred: DiffArray, target: &[f64], smooth: bool) -> Result<DiffArray> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return shape_err(format!("l1 pred of {} vs target of {}", p.len(), target.len()));
        }
        let total: f64 = p
            .iter()
            .zip(target)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if smooth && d < 1.0 {
                    0.5 * d * d
                } else if smooth {
                    d - 0.5
                } else {
                    d
                }
            })
            .sum();
        let value = Tensor::scalar(total / p.len() as f64);
        self.push(
            Op::L1 {
                pred,
                target: target.to_vec(),
                smooth,
            },
            value,
            "l1_loss",
        )
    }

    pub fn add(&mut self, a: DiffArray, b: DiffArray) -> Result<DiffArray> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn scale(&mut self, x: DiffArray, factor: f64) -> Result<DiffArray> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())?;
        self.push(Op::Scale(x, factor), value, "scale")
    }

    /// `sum_i weights[i] * x.flat[i]`.
    pub fn weighted_sum(&mut self, x: DiffArray, weights: Vec<f64>) -> Result<DiffArray> {
        let v = self.value(x).data();
        if v.len() != weights.len() {
            return shape_err(format!("weighted_sum of {} with {} weights", v.len(), weights.len()));
        }
        let value = Tensor::scalar(v.iter().zip(&weights).map(|(a, b)| a * b).sum());
        self.push(Op::WeightedSum { input: x, weights }, value, "weighted_sum")
    }

    /// Doubles its input but back-propagates three times the gradient. Exists
    /// only as a negative control for the gradient checker.
    #[doc(hidden)]
    pub fn miswired_double(&mut self, x: DiffArray) -> Result<DiffArray> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| 2.0 * a).collect())?;
        self.push(Op::Miswired(x), value, "miswired_double")
    }

    /// Back-propagates from scalar `loss`, replacing gradients from any
    /// previous backward.
    pub fn backward(&mut self, loss: DiffArray) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarOutput(shape.to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { nodes, grads } = self;
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let wants = |x: &DiffArray| nodes[x.0].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let n = nodes[input.0].value.shape()[0];
                    let o = nodes[kernel.0].value.shape()[0];
                    let ckk = geom.c * geom.kh * geom.kw;
                    let hw = geom.ho * geom.wo;
                    if wants(kernel) {
                        let mut dk = vec![0.0; o * ckk];
                        for b in 0..n {
                            gemm(
                                o,
                                hw,
                                ckk,
                                &g[b * o * hw..(b + 1) * o * hw],
                                false,
                                &cols[b * ckk * hw..(b + 1) * ckk * hw],
                                true,
                                1.0,
                                &mut dk,
                            );
                        }
                        add_into(&mut grads[kernel.0], &dk);
                    }
                    if let Some(bias) = bias.filter(wants) {
                        let mut db = vec![0.0; o];
                        for (i, chunk) in g.chunks(hw).enumerate() {
                            db[i % o] += chunk.iter().sum::<f64>();
                        }
                        add_into(&mut grads[bias.0], &db);
                    }
                    if wants(input) {
                        let k = nodes[kernel.0].value.data();
                        let chw = geom.c * geom.h * geom.w;
                        let mut dx = vec![0.0; n * chw];
                        let mut dcol = vec![0.0; ckk * hw];
                        for b in 0..n {
                            gemm(ckk, o, hw, k, true, &g[b * o * hw..(b + 1) * o * hw], false, 0.0, &mut dcol);
                            col2im(&dcol, geom, &mut dx[b * chw..(b + 1) * chw]);
                        }
                        add_into(&mut grads[input.0], &dx);
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::MaxPool2 { input, argmax } | Op::RoiPool { input, argmax } => {
                    let mut dx = vec![0.0; nodes[input.0].value.len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                    add_into(&mut grads[input.0], &dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = nodes[x.0].value.shape();
                    let hw = s[2] * s[3];
                    let dx: Vec<f64> = g
                        .iter()
                        .flat_map(|gi| std::iter::repeat_n(gi / hw as f64, hw))
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let ws = nodes[weight.0].value.shape();
                    let (d, o) = (ws[0], ws[1]);
                    let n = g.len() / o;
                    if wants(weight) {
                        let mut dw = vec![0.0; d * o];
                        gemm(d, n, o, nodes[input.0].value.data(), true, &g, false, 0.0, &mut dw);
                        add_into(&mut grads[weight.0], &dw);
                    }
                    if let Some(bias) = bias.filter(wants) {
                        let mut db = vec![0.0; o];
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        add_into(&mut grads[bias.0], &db);
                    }
                    if wants(input) {
                        let mut dx = vec![0.0; n * d];
                        gemm(n, o, d, &g, false, nodes[weight.0].value.data(), true, 0.0, &mut dx);
                        add_into(&mut grads[input.0], &dx);
                    }
                }
                Op::Gather { input, indices } => {
                    let mut dx = vec![0.0; nodes[input.0].value.len()];
                    for (gi, &src) in g.iter().zip(indices) {
                        dx[src] += gi;
                    }
                    add_into(&mut grads[input.0], &dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let classes = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &l) in labels.iter().enumerate() {
                        dx[row * classes + l] -= scale;
                    }
                    add_into(&mut grads[logits.0], &dx);
                }
                Op::L1 {
                    pred,
                    target,
                    smooth,
                } => {
                    let scale = g[0] / target.len() as f64;
                    let dx: Vec<f64> = nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(a, b)| {
                            let d = a - b;
                            let slope = if *smooth && d.abs() < 1.0 {
                                d
                            } else if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            slope * scale
                        })
                        .collect();
                    add_into(&mut grads[pred.0], &dx);
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if wants(b) {
                        add_into(&mut grads[b.0], &g);
                    }
                }
                Op::Scale(x, factor) => {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::WeightedSum { input, weights } => {
                    let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    add_into(&mut grads[input.0], &dx);
                }
                Op::Miswired(x) => {
                    let dx: Vec<f64> = g.iter().map(|v| 3.0 * v).collect();
                    add_into(&mut grads[x.0], &dx);
                }
            }
            grads[id] = Some(g);
        }
        Ok(())
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
