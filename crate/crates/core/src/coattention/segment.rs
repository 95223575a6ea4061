//! Graph-based superpixels (Felzenszwalb & Huttenlocher) on a 4-connected
//! pixel grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, SpilError};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationParams {
    /// Scale of the merge threshold `k / |C|`; larger favours larger segments.
    pub k: f64,
    pub min_size: usize,
    /// Gaussian pre-smoothing; 0 disables it.
    pub sigma: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            k: 300.0,
            min_size: 20,
            sigma: 0.8,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(SpilError::invalid(format!("segmentation k must be > 0 (got {})", self.k)));
        }
        if self.min_size < 1 {
            return Err(SpilError::invalid("segmentation min_size must be >= 1"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(SpilError::invalid(format!(
                "segmentation sigma must be >= 0 (got {})",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Per-pixel segment ids, contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    labels: Vec<usize>,
    segments: usize,
}

impl Segmentation {
    pub fn from_labels(width: usize, height: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(SpilError::invalid("label count differs from pixel count"));
        }
        let segments = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; segments];
        labels.iter().for_each(|l| seen[*l] = true);
        if seen.iter().any(|s| !s) {
            return Err(SpilError::invalid("segment ids are not contiguous"));
        }
        Ok(Self {
            width,
            height,
            labels,
            segments,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn segment_count(&self) -> usize {
        self.segments
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.segments];
        self.labels.iter().for_each(|l| s[*l] += 1);
        s
    }

    /// Debug dump: one row of space-separated ids per line.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        fs::write(path, out).map_err(|e| SpilError::io(path, e))
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Largest edge weight inside the component (Int(C)).
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn join(&mut self, a: usize, b: usize, w: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(w);
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur of one channel with edge clamping.
fn smooth(channel: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return channel.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = k.len() as isize - 1;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += k[d.unsigned_abs()] * channel[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += k[d.unsigned_abs()] * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Partitions the image into 4-connected segments, each at least `min_size`
/// pixels (unless the image itself is smaller).
pub fn segment_superpixels(image: &Image, params: &SegmentationParams) -> Result<Segmentation> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    let channels: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let raw: Vec<f64> = image.data().iter().skip(c).step_by(3).map(|v| *v as f64).collect();
            smooth(&raw, w, h, params.sigma)
        })
        .collect();
    let dist = |a: usize, b: usize| {
        channels
            .iter()
            .map(|ch| (ch[a] - ch[b]).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((dist(p, p + 1), p, p + 1));
            }
            if y + 1 < h {
                edges.push((dist(p, p + w), p, p + w));
            }
        }
    }
    // stable: equal weights keep scan order
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut set = DisjointSet::new(w * h);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (set.find(a), set.find(b));
        if ra == rb {
            continue;
        }
        let ta = set.internal[ra] + params.k / set.size[ra] as f64;
        let tb = set.internal[rb] + params.k / set.size[rb] as f64;
        if wt <= ta.min(tb) {
            set.join(ra, rb, wt);
        }
    }
    for &(wt, a, b) in &edges {
        let (ra, rb) = (set.find(a), set.find(b));
        if ra != rb && (set.size[ra] < params.min_size || set.size[rb] < params.min_size) {
            set.join(ra, rb, wt);
        }
    }

    // relabel roots in raster order of first appearance
    let mut ids = vec![usize::MAX; w * h];
    let mut next = 0;
    let mut labels = Vec::with_capacity(w * h);
    for p in 0..w * h {
        let root = set.find(p);
        if ids[root] == usize::MAX {
            ids[root] = next;
            next += 1;
        }
        labels.push(ids[root]);
    }
    Ok(Segmentation {
        width: w,
        height: h,
        labels,
        segments: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_is_one_segment() {
        let img = Image::filled(20, 13, [90, 10, 200]).unwrap();
        let seg = segment_superpixels(&img, &SegmentationParams::default()).unwrap();
        assert_eq!(seg.segment_count(), 1);
    }

    #[test]
    fn two_half_planes() {
        // Without smoothing every in-half edge weighs 0 and merges first; the
        // boundary edges weigh |(255,255,255)| = 441.7, far above k / 32.
        let mut img = Image::filled(8, 8, [0, 0, 0]).unwrap();
        for y in 0..8 {
            for x in 4..8 {
                img.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let params = SegmentationParams { k: 10.0, min_size: 1, sigma: 0.0 };
        let seg = segment_superpixels(&img, &params).unwrap();
        assert_eq!(seg.segment_count(), 2);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(seg.label(x, y), usize::from(x >= 4));
            }
        }
    }

    #[test]
    fn min_size_is_enforced() {
        let mut img = Image::filled(16, 16, [0, 0, 0]).unwrap();
        img.set_pixel(5, 5, [255, 0, 0]);
        img.set_pixel(9, 12, [0, 255, 0]);
        let params = SegmentationParams { k: 1.0, min_size: 4, sigma: 0.0 };
        let seg = segment_superpixels(&img, &params).unwrap();
        assert!(seg.sizes().iter().all(|s| *s >= 4));
    }

    #[test]
    fn rejects_bad_params() {
        let img = Image::filled(8, 8, [0, 0, 0]).unwrap();
        for p in [
            SegmentationParams { k: 0.0, ..Default::default() },
            SegmentationParams { min_size: 0, ..Default::default() },
            SegmentationParams { sigma: -1.0, ..Default::default() },
        ] {
            assert!(segment_superpixels(&img, &p).is_err());
        }
    }
}
