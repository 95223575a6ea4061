//! Pseudo ground-truth masks from the pattern shared by a query and its
//! top-ranked candidates.
//!
//! The channel vectors of every location of every map are pooled; their
//! first principal component is the common pattern. Projecting the query
//! map onto it gives an attention map, which is upsampled and averaged over
//! superpixels of the query image. Superpixels scoring above the merge
//! threshold form the mask.

mod pca;
mod segment;

pub use pca::{
    covariance, global_mean, principal_component, CovMatrix, MeanVector, PrincipalDirection,
    DEGENERATE_EIGENVALUE,
};
pub use segment::{segment_superpixels, Segmentation, SegmentationParams};

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::image::{Image, Mask};
use crate::tensor::FeatureMap;

pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.1;

/// Attention values in `[0, 1]` on a `height x width` grid (feature cells or
/// pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SpilError::invalid("attention value count differs from grid size"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SpilError::invalid("attention values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Bilinear resampling onto a `width x height` pixel raster; cell centres
    /// sit at the centres of their pixel blocks.
    pub fn upsample(&self, width: usize, height: usize) -> AttentionMap {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            let gy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let i0 = gy.floor() as usize;
            let i1 = (i0 + 1).min(self.height - 1);
            let ay = gy - i0 as f64;
            for x in 0..width {
                let gx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let j0 = gx.floor() as usize;
                let j1 = (j0 + 1).min(self.width - 1);
                let ax = gx - j0 as f64;
                let top = self.get(i0, j0) * (1.0 - ax) + self.get(i0, j1) * ax;
                let bottom = self.get(i1, j0) * (1.0 - ax) + self.get(i1, j1) * ax;
                values.push((top * (1.0 - ay) + bottom * ay).clamp(0.0, 1.0));
            }
        }
        AttentionMap {
            height,
            width,
            values,
        }
    }
}

/// `phi . (F[i,j] - mean)` at every cell, before normalisation.
pub fn raw_attention(fm: &FeatureMap, phi: &PrincipalDirection, mean: &MeanVector) -> Result<Vec<f64>> {
    if phi.vector.len() != fm.channels() || mean.0.len() != fm.channels() {
        return Err(SpilError::invalid(format!(
            "attention inputs disagree on channels: map {}, direction {}, mean {}",
            fm.channels(),
            phi.vector.len(),
            mean.0.len()
        )));
    }
    Ok(fm
        .cell_vectors()
        .map(|cell| {
            cell.iter()
                .zip(&mean.0)
                .zip(&phi.vector)
                .map(|((f, m), p)| p * (f - m))
                .sum()
        })
        .collect())
}

fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Min-max normalised projection onto `phi`; a flat response maps to zeros.
pub fn attention_map(fm: &FeatureMap, phi: &PrincipalDirection, mean: &MeanVector) -> Result<AttentionMap> {
    let raw = raw_attention(fm, phi, mean)?;
    AttentionMap::new(fm.height(), fm.width(), min_max_normalize(&raw))
}

/// Mean attention per segment, indexed by segment id.
pub fn superpixel_scores(attention: &AttentionMap, seg: &Segmentation) -> Result<Vec<(usize, f64)>> {
    if attention.width() != seg.width() || attention.height() != seg.height() {
        return Err(SpilError::invalid(format!(
            "attention is {}x{} but segmentation is {}x{}",
            attention.width(),
            attention.height(),
            seg.width(),
            seg.height()
        )));
    }
    let mut sums = vec![0.0; seg.segment_count()];
    let mut counts = vec![0usize; seg.segment_count()];
    for (label, a) in seg.labels().iter().zip(attention.values()) {
        sums[*label] += a;
        counts[*label] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(id, (s, n))| (id, s / *n as f64))
        .collect())
}

/// Union of the segments whose score is strictly above `threshold`.
pub fn pseudo_mask(scores: &[(usize, f64)], seg: &Segmentation, threshold: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SpilError::invalid(format!(
            "merge threshold must lie in [0, 1] (got {threshold})"
        )));
    }
    let mut keep = vec![false; seg.segment_count()];
    for (id, theta) in scores {
        if *id >= keep.len() {
            return Err(SpilError::invalid(format!("unknown segment id {id}")));
        }
        keep[*id] = *theta > threshold;
    }
    let bits = seg.labels().iter().map(|l| keep[*l]).collect();
    Mask::from_bits(seg.width(), seg.height(), bits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoAttentionParams {
    pub segmentation: SegmentationParams,
    pub threshold: f64,
}

impl Default for CoAttentionParams {
    fn default() -> Self {
        Self {
            segmentation: SegmentationParams::default(),
            threshold: DEFAULT_MERGE_THRESHOLD,
        }
    }
}

/// Pseudo mask for `query_image` from its feature map and the candidate
/// crop maps.
///
/// The principal direction is oriented so that attention inside
/// `target_box` is on average at least the attention outside it. When the
/// pooled covariance is degenerate the rasterised `target_box` is returned.
/// `segmentation` may carry a precomputed segmentation of `query_image`.
pub fn coattention_pipeline(
    query_image: &Image,
    query_fm: &FeatureMap,
    candidate_fms: &[&FeatureMap],
    target_box: &BoundingBox,
    params: &CoAttentionParams,
    segmentation: Option<&Segmentation>,
) -> Result<Mask> {
    if candidate_fms.is_empty() {
        return Err(SpilError::invalid("co-attention needs at least one candidate map"));
    }
    let (w, h) = (query_image.width(), query_image.height());
    let mut maps = Vec::with_capacity(candidate_fms.len() + 1);
    maps.push(query_fm);
    maps.extend_from_slice(candidate_fms);
    let mean = global_mean(&maps)?;
    let cov = covariance(&maps, &mean)?;
    let mut phi = match principal_component(&cov) {
        Ok(p) => p,
        Err(SpilError::DegenerateCovariance(_)) => return Ok(Mask::from_box(w, h, target_box)),
        Err(e) => return Err(e),
    };

    let mut raw = raw_attention(query_fm, &phi, &mean)?;
    let (gh, gw) = (query_fm.height(), query_fm.width());
    let (cell_w, cell_h) = (w as f64 / gw as f64, h as f64 / gh as f64);
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..gh {
        for j in 0..gw {
            let v = raw[i * gw + j];
            if target_box.contains_point((j as f64 + 0.5) * cell_w, (i as f64 + 0.5) * cell_h) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    if n_in > 0 && n_out > 0 && inside / (n_in as f64) < outside / (n_out as f64) {
        phi.vector.iter_mut().for_each(|v| *v = -*v);
        raw.iter_mut().for_each(|v| *v = -*v);
    }

    let attention = AttentionMap::new(gh, gw, min_max_normalize(&raw))?.upsample(w, h);
    let owned;
    let seg = match segmentation {
        Some(s) => s,
        None => {
            owned = segment_superpixels(query_image, &params.segmentation)?;
            &owned
        }
    };
    let scores = superpixel_scores(&attention, seg)?;
    pseudo_mask(&scores, seg, params.threshold)
}
