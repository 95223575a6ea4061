//! Anchor assignment and the weighted classification + box + mask loss with
//! analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::image::Mask;

use super::anchors::encode;
use super::head::{sigmoid, CellInputs, HeadParams};

/// Transition point of the smooth-L1 box loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Supervision for one Y-side image. Negative targets never carry a box or a
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub polarity: Polarity,
    pub bbox: Option<BoundingBox>,
    pub mask: Option<Mask>,
    /// Sample weight in `[0, 1]` multiplying all three losses.
    pub weight: f64,
}

impl Target {
    pub fn positive(bbox: BoundingBox, mask: Option<Mask>, weight: f64) -> Self {
        Self {
            polarity: Polarity::Positive,
            bbox: Some(bbox),
            mask,
            weight,
        }
    }

    pub fn negative(weight: f64) -> Self {
        Self {
            polarity: Polarity::Negative,
            bbox: None,
            mask: None,
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
    /// Sampled negatives per positive for the classification loss.
    pub neg_per_pos: usize,
    pub min_negatives: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_pos: 0.5,
            iou_neg: 0.3,
            neg_per_pos: 3,
            min_negatives: 8,
        }
    }
}

/// Positive when IoU with the target box reaches `iou_pos` (the best-IoU
/// anchor is always positive), negative at or below `iou_neg`, ignored in
/// between. Boxless targets make every anchor negative.
pub fn match_targets(anchors: &[BoundingBox], target: &Target, iou_pos: f64, iou_neg: f64) -> Vec<AnchorLabel> {
    let Some(gt) = target.bbox.filter(|_| target.polarity == Polarity::Positive) else {
        return vec![AnchorLabel::Negative; anchors.len()];
    };
    let ious: Vec<f64> = anchors.iter().map(|a| a.iou(&gt)).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|v| {
            if *v >= iou_pos {
                AnchorLabel::Positive
            } else if *v <= iou_neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let mut best = 0;
    for (i, v) in ious.iter().enumerate() {
        if *v > ious[best] {
            best = i;
        }
    }
    if !ious.is_empty() && ious[best] > 0.0 {
        labels[best] = AnchorLabel::Positive;
    }
    labels
}

/// Everything the loss needs from one target, with sampling already done so
/// the loss is a deterministic function of the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTarget {
    /// `(anchor, label)` pairs entering the classification loss.
    pub cls: Vec<(usize, f64)>,
    /// `(anchor, encoded target deltas)` for positive anchors.
    pub boxes: Vec<(usize, [f64; 4])>,
    /// `(cell, mask target)` for cells whose centre lies inside the box.
    pub mask_cells: Vec<(usize, f64)>,
    pub weight: f64,
    pub anchor_types: usize,
}

/// Geometry of the grid the target is projected onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    /// Pixels per cell.
    pub stride: f64,
}

/// Samples the classification anchors (all positives plus
/// `max(neg_per_pos * positives, min_negatives)` negatives), encodes the box
/// targets and projects the mask onto the grid.
pub fn prepare_target<R: Rng + ?Sized>(
    anchors: &[BoundingBox],
    anchor_types: usize,
    target: &Target,
    grid: GridGeometry,
    cfg: &MatchConfig,
    rng: &mut R,
) -> PreparedTarget {
    let labels = match_targets(anchors, target, cfg.iou_pos, cfg.iou_neg);
    let positives: Vec<usize> = (0..labels.len()).filter(|a| labels[*a] == AnchorLabel::Positive).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|a| labels[*a] == AnchorLabel::Negative).collect();
    let want = (cfg.neg_per_pos * positives.len()).max(cfg.min_negatives).min(negatives.len());
    let mut picked: Vec<usize> = sample(rng, negatives.len(), want).into_iter().map(|i| negatives[i]).collect();
    picked.sort_unstable();

    let mut cls: Vec<(usize, f64)> = positives.iter().map(|a| (*a, 1.0)).collect();
    cls.extend(picked.iter().map(|a| (*a, 0.0)));

    let (boxes, mask_cells) = match (target.polarity, target.bbox) {
        (Polarity::Positive, Some(gt)) => {
            let boxes = positives.iter().map(|a| (*a, encode(&anchors[*a], &gt))).collect();
            let cells = target
                .mask
                .as_ref()
                .map(|m| mask_cell_targets(m, &gt, grid))
                .unwrap_or_default();
            (boxes, cells)
        }
        _ => (Vec::new(), Vec::new()),
    };
    PreparedTarget {
        cls,
        boxes,
        mask_cells,
        weight: target.weight,
        anchor_types,
    }
}

/// Cells whose centre is inside `gt`, labelled 1 when at least half of the
/// cell's pixels are set in the mask.
fn mask_cell_targets(mask: &Mask, gt: &BoundingBox, grid: GridGeometry) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (cx, cy) = ((j as f64 + 0.5) * grid.stride, (i as f64 + 0.5) * grid.stride);
            if !gt.contains_point(cx, cy) {
                continue;
            }
            let x0 = (j as f64 * grid.stride) as usize;
            let y0 = (i as f64 * grid.stride) as usize;
            let x1 = (((j + 1) as f64 * grid.stride) as usize).min(mask.width());
            let y1 = (((i + 1) as f64 * grid.stride) as usize).min(mask.height());
            let mut on = 0usize;
            let mut total = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    on += mask.get(x, y) as usize;
                    total += 1;
                }
            }
            if total > 0 {
                let t = if 2 * on >= total { 1.0 } else { 0.0 };
                out.push((i * grid.width + j, t));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.total += rhs.total;
        self.cls += rhs.cls;
        self.bbox += rhs.bbox;
        self.mask += rhs.mask;
    }
}

/// Binary cross-entropy on a logit, computed without overflow.
#[inline]
pub fn bce_with_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) - y * s + (-s.abs()).exp().ln_1p()
}

#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

#[inline]
fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Weighted loss `w * (cls + box + mask)` of one prepared target. Component
/// values in the breakdown are unweighted; `total` includes the weight.
/// Gradients with respect to every head parameter are accumulated into
/// `grads`.
pub fn accumulate_loss(
    params: &HeadParams,
    inputs: &CellInputs,
    target: &PreparedTarget,
    grads: &mut HeadParams,
) -> LossBreakdown {
    let types = target.anchor_types;
    let w = target.weight;
    let mut out = LossBreakdown::default();

    if !target.cls.is_empty() {
        let n = target.cls.len() as f64;
        for &(a, y) in &target.cls {
            let (x, t) = (inputs.cell(a / types), a % types);
            let s = params.score_logit(t, x);
            out.cls += bce_with_logit(s, y) / n;
            if w != 0.0 {
                grads.add_score_grad(t, x, w * (sigmoid(s) - y) / n);
            }
        }
    }

    if !target.boxes.is_empty() {
        let n = target.boxes.len() as f64;
        for (a, goal) in &target.boxes {
            let (x, t) = (inputs.cell(a / types), a % types);
            let pred = params.box_deltas(t, x);
            for k in 0..4 {
                let diff = pred[k] - goal[k];
                out.bbox += smooth_l1(diff) / n;
                if w != 0.0 {
                    grads.add_box_grad(t, k, x, w * smooth_l1_grad(diff) / n);
                }
            }
        }
    }

    if !target.mask_cells.is_empty() {
        let n = target.mask_cells.len() as f64;
        for &(c, y) in &target.mask_cells {
            let x = inputs.cell(c);
            let s = params.mask_logit(x);
            out.mask += bce_with_logit(s, y) / n;
            if w != 0.0 {
                grads.add_mask_grad(x, w * (sigmoid(s) - y) / n);
            }
        }
    }

    out.total = w * (out.cls + out.bbox + out.mask);
    out
}

/// Loss and gradients of a batch of `(inputs, target)` samples, summed.
pub fn total_loss(params: &HeadParams, samples: &[(&CellInputs, &PreparedTarget)]) -> (LossBreakdown, HeadParams) {
    let mut grads = HeadParams::zeros(params.dims());
    let mut sum = LossBreakdown::default();
    for (inputs, target) in samples {
        sum += accumulate_loss(params, inputs, target, &mut grads);
    }
    (sum, grads)
}

/// `params - lr * grads`, element-wise.
pub fn sgd_step(params: &HeadParams, grads: &HeadParams, lr: f64) -> HeadParams {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr);
    out
}

pub fn sgd_step_in_place(params: &mut HeadParams, grads: &HeadParams, lr: f64) {
    params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .for_each(|(p, g)| *p -= lr * g);
}

/// Relative error used by the gradient checks, floored so that two
/// near-zero gradients compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `grad` and the central finite
/// differences of `f` around `x`.
pub fn finite_difference_check<F: FnMut(&[f64]) -> f64>(x: &[f64], grad: &[f64], eps: f64, mut f: F) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Compares the analytic loss gradient with central finite differences for
/// every head parameter and returns the largest relative error.
pub fn gradient_check(params: &HeadParams, inputs: &CellInputs, target: &PreparedTarget, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(SpilError::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut grads = HeadParams::zeros(params.dims());
    accumulate_loss(params, inputs, target, &mut grads);
    let dims = params.dims();
    let mut scratch = HeadParams::zeros(dims);
    Ok(finite_difference_check(params.values(), grads.values(), eps, |v| {
        let p = HeadParams::from_values(dims, v.to_vec()).expect("probe keeps dimensions");
        accumulate_loss(&p, inputs, target, &mut scratch).total
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::anchors::{propose_anchors, AnchorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target_box() -> BoundingBox {
        BoundingBox::new(8.0, 8.0, 40.0, 40.0).unwrap()
    }

    #[test]
    fn identical_anchor_is_positive() {
        let gt = target_box();
        let anchors = vec![gt, BoundingBox::new(100.0, 100.0, 110.0, 110.0).unwrap()];
        let labels = match_targets(&anchors, &Target::positive(gt, None, 1.0), 0.5, 0.3);
        assert_eq!(labels, vec![AnchorLabel::Positive, AnchorLabel::Negative]);
    }

    #[test]
    fn null_box_makes_everything_negative() {
        let anchors = propose_anchors(3, 3, &AnchorConfig::default());
        let labels = match_targets(&anchors, &Target::negative(1.0), 0.5, 0.3);
        assert!(labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn middle_band_is_ignored() {
        // IoU 0.4 between a 10x10 box and one shifted by 30/7 pixels
        let gt = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let shift = 10.0 - 2.0 * 0.4 * 100.0 / (1.4 * 10.0);
        let a = BoundingBox::new(shift, 0.0, 10.0 + shift, 10.0).unwrap();
        assert!((a.iou(&gt) - 0.4).abs() < 1e-12);
        let better = BoundingBox::new(0.5, 0.0, 10.5, 10.0).unwrap();
        let labels = match_targets(&[a, better], &Target::positive(gt, None, 1.0), 0.5, 0.3);
        assert_eq!(labels, vec![AnchorLabel::Ignore, AnchorLabel::Positive]);
    }

    #[test]
    fn negative_sampling_counts() {
        let cfg = AnchorConfig::default();
        let anchors = propose_anchors(6, 6, &cfg);
        let grid = GridGeometry {
            height: 6,
            width: 6,
            stride: 8.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = prepare_target(&anchors, 9, &Target::negative(1.0), grid, &MatchConfig::default(), &mut rng);
        assert_eq!(neg.cls.len(), 8);
        assert!(neg.boxes.is_empty() && neg.mask_cells.is_empty());

        let mask = Mask::from_box(48, 48, &target_box());
        let pos = prepare_target(
            &anchors,
            9,
            &Target::positive(target_box(), Some(mask), 1.0),
            grid,
            &MatchConfig::default(),
            &mut rng,
        );
        let n_pos = pos.cls.iter().filter(|(_, y)| *y == 1.0).count();
        assert_eq!(pos.boxes.len(), n_pos);
        assert_eq!(pos.cls.len() - n_pos, (3 * n_pos).max(8));
        assert_eq!(pos.mask_cells.len(), 16);
        assert!(pos.mask_cells.iter().all(|(_, t)| *t == 1.0));
    }

    #[test]
    fn stable_bce() {
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(800.0, 1.0) < 1e-300);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-3.0), 2.5);
        assert_eq!(smooth_l1_grad(-3.0), -1.0);
    }
}
