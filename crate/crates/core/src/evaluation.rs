//! Scoring protocols: top-1 accuracy, accuracy across Jaccard thresholds,
//! miss rate against false positives per image, and the policies that pick a
//! single grasp to execute.

use crate::detector::Detection;
use crate::geometry::{is_correct, jaccard_index, GraspRect, Point, DEFAULT_ANGLE_THRESHOLD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("no images to evaluate")]
    EmptyDataset,
    #[error("no detections to select from")]
    NoDetections,
    #[error("nearest-to-center selection needs an object center")]
    MissingObjectCenter,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

pub type Result<T> = std::result::Result<T, EvaluationError>;

/// Jaccard thresholds of the accuracy sweep.
pub const JACCARD_SWEEP: [f64; 4] = [0.25, 0.30, 0.35, 0.40];

/// Default candidate count for [`SelectionPolicy::NearestToCenter`].
pub const NEAREST_TO_CENTER_N: usize = 25;

/// Detections and ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GraspRect>,
}

/// One-to-one assignment of detections to ground truth grasps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(detection index, ground truth index)`.
    pub pairs: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub misses: Vec<usize>,
}

/// Greedy matching in descending score order (ties keep input order). Each
/// detection claims the unclaimed ground truth with the highest Jaccard index
/// among those it is correct against, lower index first on ties.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GraspRect],
    j_thresh: f64,
    a_thresh: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] || !is_correct(&dets[d].rect, gt, j_thresh, a_thresh) {
                continue;
            }
            let j = jaccard_index(&dets[d].rect, gt);
            if best.is_none_or(|(_, bj)| j > bj) {
                best = Some((g, j));
            }
        }
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                out.pairs.push((d, g));
            }
            None => out.false_positives.push(d),
        }
    }
    out.false_positives.sort_unstable();
    out.misses = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    out
}

/// Highest-scoring detection, the first one on ties.
fn top_detection(dets: &[Detection]) -> Option<&Detection> {
    dets.iter()
        .fold(None, |best: Option<&Detection>, d| match best {
            Some(b) if b.score >= d.score => Some(b),
            _ => Some(d),
        })
}

/// Fraction of images whose highest-scoring detection is correct against any
/// of that image's ground truth grasps. Images without detections count as
/// failures.
pub fn top1_accuracy(results: &[ImageResult], j_thresh: f64, a_thresh: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    let hits = results
        .iter()
        .filter(|r| {
            top_detection(&r.detections).is_some_and(|d| {
                r.ground_truth
                    .iter()
                    .any(|gt| is_correct(&d.rect, gt, j_thresh, a_thresh))
            })
        })
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Top-1 accuracy at each Jaccard threshold, with the angle threshold fixed
/// at 30 degrees.
pub fn jaccard_sweep(results: &[ImageResult], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| Ok((t, top1_accuracy(results, t, DEFAULT_ANGLE_THRESHOLD)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
    pub false_positives: usize,
    pub misses: usize,
}

/// Every distinct detection score plus the endpoints 0 and 1, descending.
pub fn threshold_grid(results: &[ImageResult]) -> Vec<f64> {
    let mut grid: Vec<f64> = results
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| d.score))
        .chain([0.0, 1.0])
        .collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    grid
}

/// Miss rate and false positives per image as the score threshold is
/// lowered. `grid` defaults to [`threshold_grid`]; the output is ordered by
/// descending threshold whatever order `grid` is in.
pub fn fppi_curve(
    results: &[ImageResult],
    grid: Option<&[f64]>,
    j_thresh: f64,
    a_thresh: f64,
) -> Result<Vec<CurvePoint>> {
    if results.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    let mut grid = grid.map(<[f64]>::to_vec).unwrap_or_else(|| threshold_grid(results));
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let total_gts: usize = results.iter().map(|r| r.ground_truth.len()).sum();
    let n = results.len() as f64;
    Ok(grid
        .into_iter()
        .map(|tau| {
            let (mut fp, mut miss) = (0, 0);
            for r in results {
                let kept: Vec<Detection> =
                    r.detections.iter().filter(|d| d.score >= tau).copied().collect();
                let m = match_detections(&kept, &r.ground_truth, j_thresh, a_thresh);
                fp += m.false_positives.len();
                miss += m.misses.len();
            }
            CurvePoint {
                threshold: tau,
                fppi: fp as f64 / n,
                miss_rate: if total_gts == 0 {
                    0.0
                } else {
                    miss as f64 / total_gts as f64
                },
                false_positives: fp,
                misses: miss,
            }
        })
        .collect())
}

/// Lowest miss rate reached without exceeding `fppi` false positives per
/// image; 1 when no point qualifies.
pub fn miss_rate_at(curve: &[CurvePoint], fppi: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.fppi <= fppi)
        .map(|p| p.miss_rate)
        .fold(1.0, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    Top1,
    /// Among the `N` highest-scoring candidates, the one closest to the
    /// object center.
    NearestToCenter(usize),
}

/// Picks the grasp to execute. Distance ties go to the higher score.
pub fn select_grasp(
    dets: &[Detection],
    policy: SelectionPolicy,
    object_center: Option<Point>,
) -> Result<Detection> {
    let top = top_detection(dets).ok_or(EvaluationError::NoDetections)?;
    match policy {
        SelectionPolicy::Top1 => Ok(*top),
        SelectionPolicy::NearestToCenter(n) => {
            let center = object_center.ok_or(EvaluationError::MissingObjectCenter)?;
            let mut ranked: Vec<&Detection> = dets.iter().collect();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
            ranked.truncate(n.max(1));
            let dist = |d: &Detection| d.rect.center().distance(center);
            let best = ranked
                .into_iter()
                .reduce(|best, d| if dist(d) < dist(best) { d } else { best })
                .expect("at least one candidate");
            Ok(*best)
        }
    }
}

/// Mean center of the ground truth grasps, used as the object center.
pub fn ground_truth_centroid(gts: &[GraspRect]) -> Option<Point> {
    if gts.is_empty() {
        return None;
    }
    let n = gts.len() as f64;
    Some(Point::new(
        gts.iter().map(|g| g.x).sum::<f64>() / n,
        gts.iter().map(|g| g.y).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    #[default]
    ImageWise,
    ObjectWise,
}

impl SplitKind {
    pub fn name(&self) -> &'static str {
        match self {
            SplitKind::ImageWise => "image-wise",
            SplitKind::ObjectWise => "object-wise",
        }
    }
}

/// Image ids on each side of a partition, each list sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions `(image id, object id)` pairs. Image-wise splits shuffle
/// images; object-wise splits shuffle objects so that no object appears on
/// both sides. About `test_fraction` of the shuffled units go to the test
/// side.
pub fn split_dataset(
    items: &[(String, String)],
    kind: SplitKind,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(EvaluationError::InvalidSplit(format!(
            "test fraction {test_fraction} outside [0, 1]"
        )));
    }
    if items.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    let unit = |item: &(String, String)| match kind {
        SplitKind::ImageWise => item.0.clone(),
        SplitKind::ObjectWise => item.1.clone(),
    };
    let mut units: Vec<String> = items.iter().map(unit).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    let n_test = (units.len() as f64 * test_fraction).round() as usize;
    let test_units: BTreeSet<String> = units.into_iter().take(n_test).collect();
    let mut manifest = SplitManifest {
        kind,
        seed,
        ..Default::default()
    };
    for item in items {
        if test_units.contains(&unit(item)) {
            manifest.test.push(item.0.clone());
        } else {
            manifest.train.push(item.0.clone());
        }
    }
    manifest.train.sort();
    manifest.test.sort();
    Ok(manifest)
}

/// The accuracy report written by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub split: String,
    pub jaccard_threshold: f64,
    pub angle_threshold: f64,
    pub accuracy: f64,
    pub n_images: usize,
}
