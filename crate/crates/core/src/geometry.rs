//! Oriented grasp rectangles and the metrics defined on them.
//!
//! Angles are degrees measured from the +x axis toward +y in raw pixel
//! coordinates (x right, y down) and are stored reduced to `[0, 180)`.
//! A rectangle's `w` edge runs along the angle direction (the gripper
//! plates), the `h` edge is perpendicular to it (the opening distance).

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Default Jaccard threshold of the grasp success criterion (strict `>`).
pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.25;
/// Default angle threshold of the grasp success criterion (inclusive `<=`).
pub const DEFAULT_ANGLE_THRESHOLD: f64 = 30.0;

const SLIVER_AREA: f64 = 1e-12;
const PARALLEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon is not rectangular: {0}")]
    NonRectangular(String),
    #[error("invalid grasp rectangle: {0}")]
    InvalidRect(String),
}

/// Reduces any real angle to `[0, 180)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(180.0);
    // rem_euclid can round up to exactly 180 for tiny negative inputs
    if r >= 180.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

fn cross(a: Point, b: Point) -> f64 {
    a.x * b.y - a.y * b.x
}

/// The five-parameter grasp configuration `{x, y, theta, w, h}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub x: f64,
    pub y: f64,
    /// Degrees in `[0, 180)`.
    pub theta: f64,
    /// Plate length.
    pub w: f64,
    /// Opening distance.
    pub h: f64,
}

impl GraspRect {
    /// Builds a rectangle, reducing `theta` modulo 180.
    pub fn new(x: f64, y: f64, theta: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let r = Self {
            x,
            y,
            theta: normalize_angle(theta),
            w,
            h,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.x, self.y, self.theta, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidRect("non-finite field".into()));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(GeometryError::InvalidRect(format!(
                "non-positive size {}x{}",
                self.w, self.h
            )));
        }
        if !(0.0..180.0).contains(&self.theta) {
            return Err(GeometryError::InvalidRect(format!(
                "angle {} outside [0, 180)",
                self.theta
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Unit vectors along the plate edge and along the opening edge.
    fn axes(&self) -> (Point, Point) {
        let (s, c) = self.theta.to_radians().sin_cos();
        (Point::new(c, s), Point::new(-s, c))
    }

    /// True when `p` lies inside or on the boundary of the rectangle.
    pub fn contains(&self, p: Point) -> bool {
        let (d, n) = self.axes();
        let rel = p.sub(self.center());
        let u = rel.x * d.x + rel.y * d.y;
        let v = rel.x * n.x + rel.y * n.y;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Total order used to canonicalize operand order of symmetric metrics.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let a = [self.x, self.y, self.theta, self.w, self.h];
        let b = [other.x, other.y, other.theta, other.w, other.h];
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// A 4-vertex polygon; vertices produced by [`rect_to_polygon`] wind with
/// positive signed area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedPolygon {
    pub vertices: [Point; 4],
}

impl OrientedPolygon {
    pub fn new(vertices: [Point; 4]) -> Self {
        Self { vertices }
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// True when `other` has the same vertices up to a cyclic shift, within `tol`.
    pub fn matches_cyclic(&self, other: &OrientedPolygon, tol: f64) -> bool {
        (0..4).any(|shift| {
            (0..4).all(|i| {
                let a = self.vertices[i];
                let b = other.vertices[(i + shift) % 4];
                (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol
            })
        })
    }
}

/// Axis-aligned box described by its center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub cx: f64,
    pub cy: f64,
    pub bw: f64,
    pub bh: f64,
}

impl AxisAlignedBox {
    pub const fn new(cx: f64, cy: f64, bw: f64, bh: f64) -> Self {
        Self { cx, cy, bw, bh }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            bw: x2 - x1,
            bh: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.bw / 2.0,
            self.cy - self.bh / 2.0,
            self.cx + self.bw / 2.0,
            self.cy + self.bh / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.bw.max(0.0) * self.bh.max(0.0)
    }

    /// Intersection over union of two axis-aligned boxes.
    pub fn iou(&self, other: &AxisAlignedBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> AxisAlignedBox {
        let (x1, y1, x2, y2) = self.corners();
        AxisAlignedBox::from_corners(
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        )
    }
}

/// Corners of `r`, ordered `v1 -> v2` along the plate direction, then around.
pub fn rect_to_polygon(r: &GraspRect) -> OrientedPolygon {
    let (d, n) = r.axes();
    let (hw, hh) = (r.w / 2.0, r.h / 2.0);
    let at = |a: f64, b: f64| Point::new(r.x + a * d.x + b * n.x, r.y + a * d.y + b * n.y);
    OrientedPolygon::new([at(-hw, -hh), at(hw, -hh), at(hw, hh), at(-hw, hh)])
}

/// Recovers the grasp configuration from a 4-vertex annotation.
///
/// `v1 -> v2` is taken as the plate edge, `v2 -> v3` as the opening edge.
pub fn polygon_to_rect(p: &OrientedPolygon) -> Result<GraspRect, GeometryError> {
    let v = &p.vertices;
    if v.iter().any(|q| !q.x.is_finite() || !q.y.is_finite()) {
        return Err(GeometryError::NonRectangular("non-finite vertex".into()));
    }
    let e = [v[1].sub(v[0]), v[2].sub(v[1]), v[3].sub(v[2]), v[0].sub(v[3])];
    let len: Vec<f64> = e.iter().map(|q| q.norm()).collect();
    let scale = len.iter().cloned().fold(0.0, f64::max);
    if scale <= 0.0 || len.iter().any(|&l| l <= scale * 1e-9) {
        return Err(GeometryError::NonRectangular("degenerate edge".into()));
    }
    for (a, b) in [(0, 2), (1, 3)] {
        if (len[a] - len[b]).abs() > PARALLEL_TOLERANCE * len[a].max(len[b]) {
            return Err(GeometryError::NonRectangular(format!(
                "opposite edges {} and {} differ",
                len[a], len[b]
            )));
        }
        let c = cross(e[a], e[b]).abs() / (len[a] * len[b]);
        if c > PARALLEL_TOLERANCE {
            return Err(GeometryError::NonRectangular("opposite edges not parallel".into()));
        }
    }
    let cx = v.iter().map(|q| q.x).sum::<f64>() / 4.0;
    let cy = v.iter().map(|q| q.y).sum::<f64>() / 4.0;
    let theta = normalize_angle(e[0].y.atan2(e[0].x).to_degrees());
    GraspRect::new(cx, cy, theta, len[0], len[1])
}

/// Drops the orientation, keeping center and dimensions.
pub fn reset_to_axis_aligned(r: &GraspRect) -> AxisAlignedBox {
    AxisAlignedBox::new(r.x, r.y, r.w, r.h)
}

/// Angular distance modulo the gripper's 180 degree symmetry, in `[0, 90]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (normalize_angle(a) - normalize_angle(b)).abs();
    d.min(180.0 - d)
}

fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| cross(pts[i], pts[(i + 1) % n])).sum();
    twice / 2.0
}

/// Sutherland-Hodgman clipping of a convex `subject` against a convex,
/// positively wound `clip` polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    const TOL: f64 = 1e-9;
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b.sub(a);
        let len = edge.norm();
        let side = |p: Point| cross(edge, p.sub(a)) / len;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (side(cur), side(prev));
            let (cin, pin) = (dc >= -TOL, dp >= -TOL);
            if cin != pin {
                let t = (dp / (dp - dc)).clamp(0.0, 1.0);
                output.push(Point::new(
                    prev.x + t * (cur.x - prev.x),
                    prev.y + t * (cur.y - prev.y),
                ));
            }
            if cin {
                output.push(cur);
            }
        }
    }
    output
}

/// Intersection area of two grasp rectangles.
pub fn intersection_area(a: &GraspRect, b: &GraspRect) -> f64 {
    let pa = rect_to_polygon(a);
    let pb = rect_to_polygon(b);
    let inter = signed_area(&clip_convex(&pa.vertices, &pb.vertices)).abs();
    if inter < SLIVER_AREA {
        0.0
    } else {
        inter
    }
}

/// Jaccard index (intersection over union) of two oriented rectangles.
pub fn jaccard_index(a: &GraspRect, b: &GraspRect) -> f64 {
    let (a, b) = match a.canonical_cmp(b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Grasp success criterion: angle within `a_thresh` (inclusive) and Jaccard
/// strictly above `j_thresh`.
pub fn is_correct(pred: &GraspRect, gt: &GraspRect, j_thresh: f64, a_thresh: f64) -> bool {
    angle_difference(pred.theta, gt.theta) <= a_thresh && jaccard_index(pred, gt) > j_thresh
}
