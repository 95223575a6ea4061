use super::head::Detection;

/// Greedy suppression by descending probability (stable for equal
/// probabilities): a detection is dropped when its IoU with any kept box
/// reaches `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| dets[*b].probability.total_cmp(&dets[*a].probability));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) < iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BoundingBox;

    fn det(p: f64, b: [f64; 4]) -> Detection {
        Detection {
            probability: p,
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            mask: None,
            anchor: 0,
        }
    }

    #[test]
    fn single_is_kept() {
        assert_eq!(nms(&[det(0.3, [0.0, 0.0, 4.0, 4.0])], 0.5).len(), 1);
    }

    #[test]
    fn duplicate_keeps_higher() {
        let out = nms(&[det(0.8, [0.0, 0.0, 4.0, 4.0]), det(0.9, [0.0, 0.0, 4.0, 4.0])], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].probability, 0.9);
    }

    #[test]
    fn disjoint_both_kept() {
        let out = nms(&[det(0.8, [0.0, 0.0, 4.0, 4.0]), det(0.9, [10.0, 10.0, 14.0, 14.0])], 0.5);
        assert_eq!(out.len(), 2);
    }
}
