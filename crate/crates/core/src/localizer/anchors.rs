use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};

/// Largest log-scale delta applied when decoding (a 1000/16 size ratio).
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    /// Anchor side lengths in pixels (for ratio 1).
    pub sizes: Vec<f64>,
    /// Width over height.
    pub ratios: Vec<f64>,
    /// Pixels per grid cell.
    pub stride: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: vec![16.0, 32.0, 64.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 8.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.sizes) || !positive(&self.ratios) || !(self.stride > 0.0) {
            return Err(SpilError::invalid(
                "anchor sizes, ratios and stride must be non-empty and positive",
            ));
        }
        Ok(())
    }

    /// Anchors per grid cell.
    pub fn types(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// One anchor per (cell, size, ratio), ordered row-major over cells, then by
/// size, then by ratio. Anchor `a` lives at cell `a / types`.
pub fn propose_anchors(map_h: usize, map_w: usize, cfg: &AnchorConfig) -> Vec<BoundingBox> {
    let mut out = Vec::with_capacity(map_h * map_w * cfg.types());
    for i in 0..map_h {
        for j in 0..map_w {
            let cx = (j as f64 + 0.5) * cfg.stride;
            let cy = (i as f64 + 0.5) * cfg.stride;
            for size in &cfg.sizes {
                for ratio in &cfg.ratios {
                    let r = ratio.sqrt();
                    out.push(BoundingBox::from_center(cx, cy, size * r, size / r));
                }
            }
        }
    }
    out
}

/// Regression target of `target` relative to `anchor`: centre shift in
/// anchor units and log size ratios.
pub fn encode(anchor: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

pub fn decode(anchor: &BoundingBox, deltas: &[f64; 4]) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    let h = ah * deltas[3].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    BoundingBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let one = AnchorConfig {
            sizes: vec![8.0],
            ratios: vec![1.0],
            stride: 4.0,
        };
        assert_eq!(propose_anchors(2, 2, &one).len(), 4);
        let many = AnchorConfig {
            sizes: vec![8.0, 16.0, 32.0],
            ratios: vec![0.5, 2.0],
            stride: 4.0,
        };
        assert_eq!(propose_anchors(4, 4, &many).len(), 96);
    }

    #[test]
    fn anchors_are_centred_on_cells() {
        let cfg = AnchorConfig::default();
        let anchors = propose_anchors(3, 5, &cfg);
        for (a, b) in anchors.iter().enumerate() {
            let cell = a / cfg.types();
            let (i, j) = (cell / 5, cell % 5);
            let (cx, cy) = b.center();
            assert!((cx - (j as f64 + 0.5) * 8.0).abs() < 1e-12);
            assert!((cy - (i as f64 + 0.5) * 8.0).abs() < 1e-12);
        }
        // ratio is width / height
        let wide = anchors[2];
        assert!((wide.width() / wide.height() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deltas_decode_to_anchor() {
        let a = BoundingBox::from_center(20.0, 12.0, 32.0, 16.0);
        let d = decode(&a, &[0.0; 4]);
        for (x, y) in d.to_array().iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config() {
        let cfg = AnchorConfig {
            sizes: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AnchorConfig {
            ratios: vec![-1.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
