use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};

use super::search::RankList;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Mean IoU over aligned prediction/ground-truth lists. A missing prediction
/// scores 0.
pub fn miou(pred: &[Option<BoundingBox>], gt: &[BoundingBox]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(SpilError::invalid(format!(
            "miou: {} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.as_ref().map_or(0.0, |p| p.iou(g)))
        .sum();
    Ok(sum / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
}

pub const DEFAULT_CURVE_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Fraction of ground-truth boxes whose prediction reaches each IoU
/// threshold.
pub fn recall_iou_curve(pred: &[Option<BoundingBox>], gt: &[BoundingBox], thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    if pred.len() != gt.len() {
        return Err(SpilError::invalid("recall curve: prediction and ground-truth lengths differ"));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpilError::invalid("recall curve thresholds must be strictly increasing"));
    }
    let ious: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.as_ref().map_or(-1.0, |p| p.iou(g)))
        .collect();
    Ok(thresholds
        .iter()
        .map(|t| {
            let hit = ious.iter().filter(|v| **v >= 0.0 && **v >= *t).count();
            CurvePoint {
                threshold: *t,
                recall: if gt.is_empty() { 0.0 } else { hit as f64 / gt.len() as f64 },
            }
        })
        .collect())
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("threshold,recall\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.threshold, p.recall));
    }
    s
}

/// Relevant image ids per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceLabels {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl RelevanceLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: &str, images: impl IntoIterator<Item = String>) {
        self.relevant.entry(query.to_string()).or_default().extend(images);
    }

    pub fn is_relevant(&self, query: &str, image: &str) -> bool {
        self.relevant.get(query).is_some_and(|s| s.contains(image))
    }

    pub fn relevant(&self, query: &str) -> impl Iterator<Item = &String> {
        self.relevant.get(query).into_iter().flatten()
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.relevant.keys()
    }
}

/// Retrieval AP: mean of precision@r over the ranks r holding a relevant
/// item. Zero when the list holds no relevant item.
pub fn average_precision_of(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, rel) in relevance.iter().enumerate() {
        if *rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn average_precision(ranklist: &RankList, rel: &RelevanceLabels) -> f64 {
    let flags: Vec<bool> = ranklist
        .entries
        .iter()
        .map(|e| rel.is_relevant(&ranklist.query_id, &e.image_id))
        .collect();
    average_precision_of(&flags)
}

pub fn mean_average_precision(lists: &[RankList], rel: &RelevanceLabels) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    lists.iter().map(|l| average_precision(l, rel)).sum::<f64>() / lists.len() as f64
}

/// A scored detection box on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Detection AP at one IoU threshold with 101-point interpolation.
///
/// Detections from all images are ranked by score (stable on ties, image
/// order then detection order). Each one is matched greedily to the unmatched
/// ground truth of its image with the highest IoU at or above the threshold.
pub fn detection_ap(dets: &[Vec<ScoredBox>], gt: &[Vec<BoundingBox>], iou_thresh: f64) -> Result<f64> {
    if dets.len() != gt.len() {
        return Err(SpilError::invalid("detection_ap: per-image lists differ in length"));
    }
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));

    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (i, j) in order {
        let b = &dets[i][j].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt[i].iter().enumerate() {
            if taken[i][g] {
                continue;
            }
            let v = b.iou(gb);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[i][g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(interpolated_ap(&tp, n_gt))
}

/// 101-point interpolated AP of a ranked true-positive sequence.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, t) in tp.iter().enumerate() {
        hits += *t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let k = recall.partition_point(|v| *v < r);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: [f64; 4]) -> BoundingBox {
        BoundingBox::new(v[0], v[1], v[2], v[3]).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b([20.0, 20.0, 30.0, 30.0])), 0.0);
        assert_eq!(iou(&a, &b([5.0, 0.0, 15.0, 10.0])), 50.0 / 150.0);
    }

    #[test]
    fn miou_half_missing() {
        let g = vec![b([0.0, 0.0, 4.0, 4.0]); 4];
        let p = vec![Some(g[0]), None, Some(g[0]), None];
        assert_eq!(miou(&p, &g).unwrap(), 0.5);
        assert!(miou(&p[..3], &g).is_err());
    }

    #[test]
    fn curve_single_pair() {
        let g = b([0.0, 0.0, 10.0, 10.0]);
        let p = b([0.0, 0.0, 10.0, 6.0]);
        let c = recall_iou_curve(&[Some(p)], &[g], &[0.5, 0.7]).unwrap();
        assert_eq!(c[0].recall, 1.0);
        assert_eq!(c[1].recall, 0.0);
    }

    #[test]
    fn retrieval_ap_arithmetic() {
        assert!((average_precision_of(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision_of(&[true, true]), 1.0);
        assert_eq!(average_precision_of(&[false, false]), 0.0);
    }

    #[test]
    fn detection_ap_extremes() {
        let g = vec![vec![b([0.0, 0.0, 4.0, 4.0])], vec![b([1.0, 1.0, 5.0, 5.0])]];
        let perfect: Vec<Vec<ScoredBox>> = g
            .iter()
            .map(|v| vec![ScoredBox { score: 0.9, bbox: v[0] }])
            .collect();
        assert!((detection_ap(&perfect, &g, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(detection_ap(&[vec![], vec![]], &g, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn csv_header() {
        let s = curve_csv(&[CurvePoint { threshold: 0.5, recall: 1.0 }]);
        assert_eq!(s, "threshold,recall\n0.5,1\n");
    }
}
