//! Linear detection, box and mask heads evaluated at every grid cell.
//!
//! Each cell's input is its correlation vector, optionally concatenated with
//! the vectors of its `(2r+1)^2` neighbourhood (zero-padded at the border).
//! Every anchor type has its own score and box regressors; the mask head is
//! shared across anchor types and predicts one logit per cell.

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::image::Mask;
use crate::tensor::CorrelationMap;

use super::anchors::{decode, propose_anchors, AnchorConfig};

/// Initial probability of every score and mask logit.
pub const PRIOR_PROBABILITY: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    /// Correlation channels per cell.
    pub channels: usize,
    /// Neighbourhood radius in cells; 0 means the cell alone.
    pub context: usize,
    pub anchor_types: usize,
}

impl HeadDims {
    /// Length of one cell's input vector.
    pub fn input_dim(&self) -> usize {
        let side = 2 * self.context + 1;
        self.channels * side * side
    }

    fn offsets(&self) -> Offsets {
        let d = self.input_dim();
        let a = self.anchor_types;
        let score_w = 0;
        let score_b = score_w + a * d;
        let box_w = score_b + a;
        let box_b = box_w + a * 4 * d;
        let mask_w = box_b + a * 4;
        let mask_b = mask_w + d;
        Offsets {
            score_w,
            score_b,
            box_w,
            box_b,
            mask_w,
            mask_b,
            len: mask_b + 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    score_w: usize,
    score_b: usize,
    box_w: usize,
    box_b: usize,
    mask_w: usize,
    mask_b: usize,
    len: usize,
}

/// Flat parameter vector of the three heads. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    dims: HeadDims,
    values: Vec<f64>,
}

/// Named parameter blocks, in storage order.
pub const PARAM_BLOCKS: [&str; 6] = [
    "score.weight",
    "score.bias",
    "box.weight",
    "box.bias",
    "mask.weight",
    "mask.bias",
];

impl HeadParams {
    /// Zero weights, box biases 0, score and mask biases at the rare-positive
    /// prior.
    pub fn init(dims: HeadDims) -> Self {
        let mut p = Self::zeros(dims);
        let o = dims.offsets();
        let prior = logit(PRIOR_PROBABILITY);
        p.values[o.score_b..o.box_w].fill(prior);
        p.values[o.mask_b] = prior;
        p
    }

    pub fn zeros(dims: HeadDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.offsets().len],
        }
    }

    pub fn from_values(dims: HeadDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.offsets().len {
            return Err(SpilError::invalid(format!(
                "head needs {} parameters, got {}",
                dims.offsets().len,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpilError::invalid("head parameters must be finite"));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> HeadDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Slices for each of [`PARAM_BLOCKS`].
    pub fn blocks(&self) -> [&[f64]; 6] {
        let o = self.dims.offsets();
        [
            &self.values[o.score_w..o.score_b],
            &self.values[o.score_b..o.box_w],
            &self.values[o.box_w..o.box_b],
            &self.values[o.box_b..o.mask_w],
            &self.values[o.mask_w..o.mask_b],
            &self.values[o.mask_b..o.len],
        ]
    }

    #[inline]
    fn score_weights(&self, t: usize) -> &[f64] {
        let d = self.dims.input_dim();
        let o = self.dims.offsets();
        &self.values[o.score_w + t * d..o.score_w + (t + 1) * d]
    }

    #[inline]
    fn box_weights(&self, t: usize, k: usize) -> &[f64] {
        let d = self.dims.input_dim();
        let o = self.dims.offsets();
        let start = o.box_w + (t * 4 + k) * d;
        &self.values[start..start + d]
    }

    /// Score logit of anchor type `t` for one cell input.
    #[inline]
    pub fn score_logit(&self, t: usize, x: &[f64]) -> f64 {
        dot(self.score_weights(t), x) + self.values[self.dims.offsets().score_b + t]
    }

    pub fn box_deltas(&self, t: usize, x: &[f64]) -> [f64; 4] {
        let o = self.dims.offsets();
        let mut d = [0.0; 4];
        for (k, v) in d.iter_mut().enumerate() {
            *v = dot(self.box_weights(t, k), x) + self.values[o.box_b + t * 4 + k];
        }
        d
    }

    pub fn mask_logit(&self, x: &[f64]) -> f64 {
        let o = self.dims.offsets();
        dot(&self.values[o.mask_w..o.mask_b], x) + self.values[o.mask_b]
    }

    // gradient accumulation helpers, used with `self` as a gradient buffer

    pub(crate) fn add_score_grad(&mut self, t: usize, x: &[f64], g: f64) {
        let d = self.dims.input_dim();
        let o = self.dims.offsets();
        axpy(&mut self.values[o.score_w + t * d..o.score_w + (t + 1) * d], x, g);
        self.values[o.score_b + t] += g;
    }

    pub(crate) fn add_box_grad(&mut self, t: usize, k: usize, x: &[f64], g: f64) {
        let d = self.dims.input_dim();
        let o = self.dims.offsets();
        let start = o.box_w + (t * 4 + k) * d;
        axpy(&mut self.values[start..start + d], x, g);
        self.values[o.box_b + t * 4 + k] += g;
    }

    pub(crate) fn add_mask_grad(&mut self, x: &[f64], g: f64) {
        let o = self.dims.offsets();
        axpy(&mut self.values[o.mask_w..o.mask_b], x, g);
        self.values[o.mask_b] += g;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Per-cell head inputs gathered from a correlation map.
#[derive(Debug, Clone)]
pub struct CellInputs {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl CellInputs {
    pub fn new(corr: &CorrelationMap, context: usize) -> Self {
        let (h, w, c) = (corr.height(), corr.width(), corr.channels());
        let side = 2 * context + 1;
        let dim = c * side * side;
        let mut data = vec![0.0; h * w * dim];
        let map = corr.map();
        for i in 0..h {
            for j in 0..w {
                let dst = &mut data[(i * w + j) * dim..(i * w + j + 1) * dim];
                for di in 0..side {
                    let ii = i as isize + di as isize - context as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..side {
                        let jj = j as isize + dj as isize - context as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let slot = (di * side + dj) * c;
                        dst[slot..slot + c].copy_from_slice(map.cell(ii as usize, jj as usize));
                    }
                }
            }
        }
        Self {
            height: h,
            width: w,
            dim,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub probability: f64,
    pub bbox: BoundingBox,
    pub mask: Option<Mask>,
    /// Index of the anchor the detection was decoded from.
    pub anchor: usize,
}

/// Per-cell mask probabilities on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub probabilities: Vec<f64>,
}

impl MaskGrid {
    /// Pixel mask of `bbox`: pixels inside the box whose cell probability is
    /// at least 0.5.
    pub fn rasterize(&self, bbox: &BoundingBox, width: usize, height: usize) -> Mask {
        let mut m = Mask::empty(width, height);
        let (sx, sy) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !bbox.contains_point(px, py) {
                    continue;
                }
                let j = ((px * sx) as usize).min(self.width - 1);
                let i = ((py * sy) as usize).min(self.height - 1);
                if self.probabilities[i * self.width + j] >= 0.5 {
                    m.set(x, y, true);
                }
            }
        }
        m
    }
}

fn check_dims(inputs: &CellInputs, params: &HeadParams, cfg: &AnchorConfig) -> Result<()> {
    let dims = params.dims();
    if inputs.dim() != dims.input_dim() || cfg.types() != dims.anchor_types {
        return Err(SpilError::invalid(format!(
            "head expects input dim {} and {} anchor types, got {} and {}",
            dims.input_dim(),
            dims.anchor_types,
            inputs.dim(),
            cfg.types()
        )));
    }
    Ok(())
}

/// Scores and boxes for every anchor of the grid plus the per-cell mask
/// probabilities. Boxes are clipped to `image_size` (width, height).
pub fn detect(
    corr: &CorrelationMap,
    params: &HeadParams,
    cfg: &AnchorConfig,
    image_size: (usize, usize),
) -> Result<(Vec<Detection>, MaskGrid)> {
    let inputs = CellInputs::new(corr, params.dims().context);
    detect_inputs(&inputs, params, cfg, image_size)
}

pub fn detect_inputs(
    inputs: &CellInputs,
    params: &HeadParams,
    cfg: &AnchorConfig,
    image_size: (usize, usize),
) -> Result<(Vec<Detection>, MaskGrid)> {
    check_dims(inputs, params, cfg)?;
    let anchors = propose_anchors(inputs.height(), inputs.width(), cfg);
    let types = cfg.types();
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut dets = Vec::with_capacity(anchors.len());
    for (a, anchor) in anchors.iter().enumerate() {
        let x = inputs.cell(a / types);
        let t = a % types;
        dets.push(Detection {
            probability: sigmoid(params.score_logit(t, x)),
            bbox: decode(anchor, &params.box_deltas(t, x)).clip(iw, ih),
            mask: None,
            anchor: a,
        });
    }
    let grid = mask_grid(inputs, params);
    Ok((dets, grid))
}

pub fn mask_grid(inputs: &CellInputs, params: &HeadParams) -> MaskGrid {
    MaskGrid {
        height: inputs.height(),
        width: inputs.width(),
        probabilities: (0..inputs.cells())
            .map(|c| sigmoid(params.mask_logit(inputs.cell(c))))
            .collect(),
    }
}

/// The highest-probability anchor (lowest index on ties) with its decoded
/// box; equivalent to the argmax over [`detect`] without decoding every box.
pub fn best_detection(
    inputs: &CellInputs,
    params: &HeadParams,
    cfg: &AnchorConfig,
    image_size: (usize, usize),
) -> Result<Detection> {
    check_dims(inputs, params, cfg)?;
    let types = cfg.types();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for cell in 0..inputs.cells() {
        let x = inputs.cell(cell);
        for t in 0..types {
            let s = params.score_logit(t, x);
            if s > best.0 {
                best = (s, cell * types + t);
            }
        }
    }
    let a = best.1;
    let (i, j) = (a / types / inputs.width(), a / types % inputs.width());
    let anchor = single_anchor(i, j, a % types, cfg);
    let x = inputs.cell(a / types);
    Ok(Detection {
        probability: sigmoid(best.0),
        bbox: decode(&anchor, &params.box_deltas(a % types, x))
            .clip(image_size.0 as f64, image_size.1 as f64),
        mask: None,
        anchor: a,
    })
}

fn single_anchor(i: usize, j: usize, t: usize, cfg: &AnchorConfig) -> BoundingBox {
    let size = cfg.sizes[t / cfg.ratios.len()];
    let r = cfg.ratios[t % cfg.ratios.len()].sqrt();
    BoundingBox::from_center(
        (j as f64 + 0.5) * cfg.stride,
        (i as f64 + 0.5) * cfg.stride,
        size * r,
        size / r,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMap;

    fn corr(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> CorrelationMap {
        let mut data = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        CorrelationMap::from_map(FeatureMap::new(h, w, c, data).unwrap())
    }

    #[test]
    fn bias_only_scores() {
        let cfg = AnchorConfig::default();
        let dims = HeadDims {
            channels: 3,
            context: 0,
            anchor_types: cfg.types(),
        };
        let mut p = HeadParams::zeros(dims);
        let beta = 0.7;
        for v in p.values_mut()[3 * 9..3 * 9 + 9].iter_mut() {
            *v = beta;
        }
        let c = corr(4, 4, 3, |i, j, k| (i + 2 * j + k) as f64);
        let (dets, _) = detect(&c, &p, &cfg, (32, 32)).unwrap();
        assert_eq!(dets.len(), 4 * 4 * 9);
        assert!(dets.iter().all(|d| (d.probability - sigmoid(beta)).abs() < 1e-15));
    }

    #[test]
    fn zero_deltas_reproduce_clipped_anchors() {
        let cfg = AnchorConfig::default();
        let dims = HeadDims {
            channels: 2,
            context: 1,
            anchor_types: cfg.types(),
        };
        let p = HeadParams::init(dims);
        let c = corr(3, 3, 2, |_, _, _| 1.0);
        let (dets, grid) = detect(&c, &p, &cfg, (24, 24)).unwrap();
        let anchors = propose_anchors(3, 3, &cfg);
        for (d, a) in dets.iter().zip(&anchors) {
            let want = a.clip(24.0, 24.0).to_array();
            for (x, y) in d.bbox.to_array().iter().zip(want) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((d.probability - PRIOR_PROBABILITY).abs() < 1e-12);
        }
        assert!(grid.probabilities.iter().all(|v| (v - PRIOR_PROBABILITY).abs() < 1e-12));
    }

    #[test]
    fn planted_cell_wins() {
        let cfg = AnchorConfig::default();
        let dims = HeadDims {
            channels: 4,
            context: 0,
            anchor_types: cfg.types(),
        };
        let mut p = HeadParams::init(dims);
        // positively aligned score weights for every anchor type
        for v in p.values_mut()[..4 * 9].iter_mut() {
            *v = 0.5;
        }
        let c = corr(5, 6, 4, |i, j, _| if (i, j) == (3, 1) { 4.0 } else { 0.1 * (i + j) as f64 });
        let (dets, _) = detect(&c, &p, &cfg, (48, 40)).unwrap();
        let best = dets
            .iter()
            .fold(&dets[0], |b, d| if d.probability > b.probability { d } else { b });
        assert_eq!(best.anchor / 9, 3 * 6 + 1);
        let inputs = CellInputs::new(&c, 0);
        let fast = best_detection(&inputs, &p, &cfg, (48, 40)).unwrap();
        assert_eq!(fast.anchor, best.anchor);
        assert_eq!(fast.bbox, best.bbox);
    }

    #[test]
    fn context_inputs_are_zero_padded() {
        let c = corr(2, 2, 1, |i, j, _| (1 + i * 2 + j) as f64);
        let inputs = CellInputs::new(&c, 1);
        assert_eq!(inputs.dim(), 9);
        assert_eq!(inputs.cell(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = AnchorConfig::default();
        let p = HeadParams::init(HeadDims {
            channels: 5,
            context: 0,
            anchor_types: 9,
        });
        let c = corr(2, 2, 4, |_, _, _| 0.0);
        assert!(detect(&c, &p, &cfg, (16, 16)).is_err());
    }
}
