//! Dense feature grids and the correlation primitives that run on them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, SpilError};

/// Spatial grid of channel vectors stored row-major in `(h, w, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(SpilError::invalid(format!(
                "feature map dims {height}x{width}x{channels} must be positive"
            )));
        }
        if data.len() != height * width * channels {
            return Err(SpilError::invalid(format!(
                "feature map has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SpilError::invalid(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + ch]
    }

    /// Channel vector at grid cell `(i, j)`.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Channel vectors in row-major cell order.
    pub fn cell_vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    /// Copy with `offset` added to every cell.
    pub fn shifted(&self, offset: &[f64]) -> Result<FeatureMap> {
        if offset.len() != self.channels {
            return Err(SpilError::invalid("offset length differs from channel count"));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .flat_map(|cell| cell.iter().zip(offset).map(|(a, b)| a + b))
            .collect();
        FeatureMap::new(self.height, self.width, self.channels, data)
    }

    /// Reads the text container: a header line `h w c` followed by `h*w*c`
    /// whitespace-separated reals.
    pub fn read_text(path: &Path) -> Result<FeatureMap> {
        let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
        let mut tokens = text.split_whitespace();
        let mut dim = |name: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| SpilError::parse(path, format!("missing or bad header field {name}")))
        };
        let (h, w, c) = (dim("h")?, dim("w")?, dim("c")?);
        let data = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| SpilError::parse(path, format!("bad value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureMap::new(h, w, c, data).map_err(|e| SpilError::parse(path, e.to_string()))
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.channels);
        for cell in self.cell_vectors() {
            let line: Vec<String> = cell.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        fs::write(path, out).map_err(|e| SpilError::io(path, e))
    }
}

/// One weight per channel; a 1x1 depth-wise template.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel(Vec<f64>);

impl Kernel {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(SpilError::invalid("kernel must be non-empty and finite"));
        }
        Ok(Self(values))
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Output of [`depthwise_xcorr`]; same layout as the searched map.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap(FeatureMap);

impl CorrelationMap {
    pub fn from_map(map: FeatureMap) -> Self {
        Self(map)
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    /// Sum over channels at every cell.
    pub fn channel_sum(&self) -> Vec<f64> {
        self.0.cell_vectors().map(|c| c.iter().sum()).collect()
    }
}

/// Per-channel mean over all spatial locations.
pub fn avg_pool_spatial(fm: &FeatureMap) -> Kernel {
    let mut acc = vec![0.0; fm.channels];
    for cell in fm.cell_vectors() {
        for (a, v) in acc.iter_mut().zip(cell) {
            *a += v;
        }
    }
    let n = fm.cells() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Kernel(acc)
}

/// Mean of the spatially pooled crops.
pub fn mean_kernel<'a, I>(crops: I) -> Result<Kernel>
where
    I: IntoIterator<Item = &'a FeatureMap>,
{
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for crop in crops {
        let pooled = avg_pool_spatial(crop);
        match acc.as_mut() {
            None => acc = Some(pooled.0),
            Some(a) => {
                if a.len() != pooled.0.len() {
                    return Err(SpilError::invalid(format!(
                        "crop {n} has {} channels, expected {}",
                        pooled.0.len(),
                        a.len()
                    )));
                }
                a.iter_mut().zip(&pooled.0).for_each(|(x, y)| *x += y);
            }
        }
        n += 1;
    }
    let mut acc = acc.ok_or_else(|| SpilError::invalid("mean_kernel needs at least one crop"))?;
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(Kernel(acc))
}

/// Depth-wise correlation of a 1x1 kernel: every channel of every cell is
/// scaled by the matching kernel weight.
pub fn depthwise_xcorr(kernel: &Kernel, fm: &FeatureMap) -> Result<CorrelationMap> {
    if kernel.channels() != fm.channels {
        return Err(SpilError::invalid(format!(
            "kernel has {} channels, feature map has {}",
            kernel.channels(),
            fm.channels
        )));
    }
    let data = fm
        .data
        .chunks_exact(fm.channels)
        .flat_map(|cell| cell.iter().zip(&kernel.0).map(|(f, k)| f * k))
        .collect();
    Ok(CorrelationMap(FeatureMap {
        height: fm.height,
        width: fm.width,
        channels: fm.channels,
        data,
    }))
}

/// How head inputs are formed from a kernel and a Y-side map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    /// [`depthwise_xcorr`] as is.
    Raw,
    /// [`cosine_xcorr`] with the given cell-norm floor.
    Cosine { floor: f64 },
}

impl Correlation {
    pub fn apply(&self, kernel: &Kernel, fm: &FeatureMap) -> Result<CorrelationMap> {
        match *self {
            Correlation::Raw => depthwise_xcorr(kernel, fm),
            Correlation::Cosine { floor } => cosine_xcorr(kernel, fm, floor),
        }
    }
}

/// Depth-wise correlation of the unit-norm kernel with cells scaled to unit
/// norm; cells with norm below `floor` are divided by `floor` instead. The
/// channel sum of a cell is then its cosine with the kernel, shrunk for weak
/// cells.
pub fn cosine_xcorr(kernel: &Kernel, fm: &FeatureMap, floor: f64) -> Result<CorrelationMap> {
    if !(floor > 0.0) {
        return Err(SpilError::invalid("cosine correlation floor must be positive"));
    }
    let kn = kernel.norm().max(floor);
    let unit = Kernel(kernel.0.iter().map(|k| k / kn).collect());
    let data = fm
        .data
        .chunks_exact(fm.channels)
        .flat_map(|cell| {
            let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
            cell.iter().map(move |v| v / n)
        })
        .collect();
    let scaled = FeatureMap {
        height: fm.height,
        width: fm.width,
        channels: fm.channels,
        data,
    };
    depthwise_xcorr(&unit, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_examples() {
        let fm = FeatureMap::filled(3, 2, 4, 1.5).unwrap();
        assert_eq!(avg_pool_spatial(&fm).values(), &[1.5; 4]);
        let fm = FeatureMap::new(1, 2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(avg_pool_spatial(&fm).values(), &[1.0]);
    }

    #[test]
    fn mean_kernel_examples() {
        let a = FeatureMap::filled(2, 2, 3, 2.0).unwrap();
        let b = FeatureMap::filled(4, 1, 3, 4.0).unwrap();
        assert_eq!(mean_kernel([&a, &b]).unwrap().values(), &[3.0; 3]);
        assert_eq!(mean_kernel([&a]).unwrap(), avg_pool_spatial(&a));
        assert!(mean_kernel(std::iter::empty()).is_err());
        let c = FeatureMap::filled(2, 2, 2, 1.0).unwrap();
        assert!(mean_kernel([&a, &c]).is_err());
    }

    #[test]
    fn xcorr_identity_and_zero() {
        let fm = FeatureMap::new(1, 2, 2, vec![1.0, -2.0, 3.5, 4.0]).unwrap();
        let ones = Kernel::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(depthwise_xcorr(&ones, &fm).unwrap().map(), &fm);
        let zeros = Kernel::new(vec![0.0, 0.0]).unwrap();
        assert!(depthwise_xcorr(&zeros, &fm)
            .unwrap()
            .map()
            .data()
            .iter()
            .all(|v| *v == 0.0));
        let bad = Kernel::new(vec![1.0; 3]).unwrap();
        assert!(depthwise_xcorr(&bad, &fm).is_err());
    }

    #[test]
    fn text_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMap::new(2, 1, 3, vec![0.1, -2.0, 3.25, 1e-9, 7.0, 0.0]).unwrap();
        let p = dir.path().join("x.fm");
        fm.write_text(&p).unwrap();
        assert_eq!(FeatureMap::read_text(&p).unwrap(), fm);
        std::fs::write(&p, "2 2 1\n1 2 3").unwrap();
        assert!(FeatureMap::read_text(&p).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureMap::new(1, 1, 1, vec![f64::INFINITY]).is_err());
        assert!(Kernel::new(vec![]).is_err());
    }
}
