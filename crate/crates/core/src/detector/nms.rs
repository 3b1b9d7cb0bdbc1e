use crate::geometry::AxisAlignedBox;

/// Greedy non-maximum suppression. Returns indices of the kept boxes in
/// descending score order; equal scores keep the lower index first. A box is
/// suppressed when its IoU with an already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[AxisAlignedBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_collapse() {
        let b = AxisAlignedBox::new(10.0, 10.0, 8.0, 8.0);
        assert_eq!(nms(&[b, b], &[0.5, 0.5], 0.7), vec![0]);
        assert_eq!(nms(&[b, b], &[0.4, 0.6], 0.7), vec![1]);
    }

    #[test]
    fn overlap_threshold() {
        let a = AxisAlignedBox::from_corners(0.0, 0.0, 10.0, 10.0);
        // IoU 0.9 with a
        let b = AxisAlignedBox::from_corners(0.0, 0.0, 10.0, 9.0);
        let far = AxisAlignedBox::from_corners(50.0, 50.0, 60.0, 60.0);
        assert!((a.iou(&b) - 0.9).abs() < 1e-12);
        assert_eq!(nms(&[a, b, far], &[0.9, 0.8, 0.1], 0.5), vec![0, 2]);
        assert_eq!(nms(&[a, b, far], &[0.9, 0.8, 0.1], 0.95), vec![0, 1, 2]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }
}
