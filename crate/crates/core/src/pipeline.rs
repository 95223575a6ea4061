//! Image storage and the feature-level operations shared by training,
//! evaluation and few-shot detection.
//!
//! Every image is kept at original resolution and as a Y-side copy resized
//! so its shorter side is `y_short` pixels. Boxes crossing these functions
//! are in original pixels unless a name says otherwise.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;

use crate::bbox::BoundingBox;
use crate::coattention::{segment_superpixels, Segmentation, SegmentationParams};
use crate::error::{Result, SpilError};
use crate::evalkit::{search_rank, RankList, SearchImage, SearchQuery};
use crate::features::{extract_features_for, FeatureMode, FeatureProviderConfig};
use crate::image::Image;
use crate::localizer::{best_detection, detect_inputs, AnchorConfig, CellInputs, Detection, HeadParams};
use crate::tensor::{mean_kernel, Correlation, CorrelationMap, FeatureMap, Kernel};

/// Longest Y-side edge relative to the shorter one.
const MAX_ASPECT: f64 = 1000.0 / 600.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Shorter edge of Y-side images, pixels.
    pub y_short: usize,
    /// Side of the square X-side crops, pixels.
    pub crop_size: usize,
    /// Crop window extent relative to the box.
    pub crop_margin: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            y_short: 128,
            crop_size: 64,
            crop_margin: 1.5,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.y_short < 16 || self.crop_size < 8 || !(self.crop_margin >= 1.0) {
            return Err(SpilError::invalid(
                "geometry needs y_short >= 16, crop_size >= 8 and crop_margin >= 1",
            ));
        }
        Ok(())
    }

    /// Y-side size of an image and the resize factor.
    pub fn y_dims(&self, width: usize, height: usize) -> (usize, usize, f64) {
        let short = width.min(height) as f64;
        let mut scale = self.y_short as f64 / short;
        let long = width.max(height) as f64;
        let cap = (self.y_short as f64 * MAX_ASPECT).round();
        if long * scale > cap {
            scale = cap / long;
        }
        let w = ((width as f64 * scale).round() as usize).max(8);
        let h = ((height as f64 * scale).round() as usize).max(8);
        (w, h, scale)
    }

    pub fn crop_window(&self, bbox: &BoundingBox) -> BoundingBox {
        let (cx, cy) = bbox.center();
        BoundingBox::from_center(cx, cy, bbox.width() * self.crop_margin, bbox.height() * self.crop_margin)
    }
}

pub struct BankImage {
    pub id: String,
    pub original: Image,
    pub y_image: Image,
    /// Y-side pixels per original pixel.
    pub scale: f64,
    pub features: FeatureMap,
    segmentation: OnceLock<Segmentation>,
}

impl BankImage {
    pub fn size(&self) -> (usize, usize) {
        (self.original.width(), self.original.height())
    }

    pub fn y_size(&self) -> (usize, usize) {
        (self.y_image.width(), self.y_image.height())
    }

    pub fn to_y(&self, b: &BoundingBox) -> BoundingBox {
        b.scale(self.scale, self.scale)
    }

    pub fn from_y(&self, b: &BoundingBox) -> BoundingBox {
        b.scale(1.0 / self.scale, 1.0 / self.scale)
            .clip(self.original.width() as f64, self.original.height() as f64)
    }
}

type CropKey = (usize, [u64; 4]);

/// Images with their Y-side features, plus caches for crops and
/// segmentations.
pub struct ImageBank {
    images: Vec<BankImage>,
    index: BTreeMap<String, usize>,
    features: FeatureProviderConfig,
    geometry: Geometry,
    segmentation: SegmentationParams,
    crops: Mutex<BTreeMap<CropKey, FeatureMap>>,
    correlation: Correlation,
}

impl ImageBank {
    /// Builds the bank; `load` maps an id to its original image. Feature
    /// extraction runs in parallel and results keep the id order.
    pub fn build<F>(
        ids: &[String],
        load: F,
        features: &FeatureProviderConfig,
        geometry: &Geometry,
        segmentation: &SegmentationParams,
    ) -> Result<Self>
    where
        F: Fn(&str) -> Result<Image> + Sync,
    {
        features.validate()?;
        geometry.validate()?;
        segmentation.validate()?;
        let images = ids
            .par_iter()
            .map(|id| {
                let original = load(id)?;
                let (w, h, scale) = geometry.y_dims(original.width(), original.height());
                let y_image = original.resize(w, h)?;
                let fm = extract_features_for(id, &y_image, features)?;
                Ok(BankImage {
                    id: id.clone(),
                    original,
                    y_image,
                    scale,
                    features: fm,
                    segmentation: OnceLock::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut index = BTreeMap::new();
        for (i, im) in images.iter().enumerate() {
            if index.insert(im.id.clone(), i).is_some() {
                return Err(SpilError::invalid(format!("duplicate image id '{}'", im.id)));
            }
        }
        Ok(Self {
            images,
            index,
            features: features.clone(),
            geometry: geometry.clone(),
            segmentation: *segmentation,
            crops: Mutex::new(BTreeMap::new()),
            correlation: Correlation::Raw,
        })
    }

    /// Sets how kernels are correlated with Y-side maps.
    pub fn with_correlation(mut self, correlation: Correlation) -> Self {
        self.correlation = correlation;
        self
    }

    pub fn correlation(&self) -> Correlation {
        self.correlation
    }

    /// Correlation of `kernel` with the Y-side map of `id`.
    pub fn correlate(&self, id: &str, kernel: &Kernel) -> Result<CorrelationMap> {
        self.correlation.apply(kernel, &self.get(id)?.features)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn stride(&self) -> usize {
        self.features.stride
    }

    pub fn channels(&self) -> usize {
        self.features.out_channels
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|im| im.id.as_str())
    }

    pub fn get(&self, id: &str) -> Result<&BankImage> {
        self.index
            .get(id)
            .map(|i| &self.images[*i])
            .ok_or_else(|| SpilError::invalid(format!("image '{id}' is not loaded")))
    }

    /// Superpixels of the Y-side image, computed once.
    pub fn segmentation(&self, id: &str) -> Result<&Segmentation> {
        let im = self.get(id)?;
        if let Some(s) = im.segmentation.get() {
            return Ok(s);
        }
        let s = segment_superpixels(&im.y_image, &self.segmentation)?;
        Ok(im.segmentation.get_or_init(|| s))
    }

    /// X-side features of the crop around `bbox` (original pixels), cached.
    pub fn crop_features(&self, id: &str, bbox: &BoundingBox) -> Result<FeatureMap> {
        let idx = *self
            .index
            .get(id)
            .ok_or_else(|| SpilError::invalid(format!("image '{id}' is not loaded")))?;
        let key = (idx, bbox.to_array().map(f64::to_bits));
        if let Some(fm) = self.crops.lock().expect("crop cache").get(&key) {
            return Ok(fm.clone());
        }
        let im = &self.images[idx];
        let window = self.geometry.crop_window(bbox);
        let fm = match &self.features.mode {
            FeatureMode::File(_) => y_subgrid(&im.features, &im.to_y(&window), self.stride() as f64)?,
            _ => {
                let crop = im
                    .original
                    .crop_resize(&window, self.geometry.crop_size, self.geometry.crop_size)?;
                crate::features::extract_features(&crop, &self.features)?
            }
        };
        self.crops.lock().expect("crop cache").insert(key, fm.clone());
        Ok(fm)
    }

    /// Mean kernel over the crops of `(image, box)` pairs.
    pub fn kernel<'a, I>(&self, crops: I) -> Result<Kernel>
    where
        I: IntoIterator<Item = (&'a str, &'a BoundingBox)>,
    {
        let maps = crops
            .into_iter()
            .map(|(id, b)| self.crop_features(id, b))
            .collect::<Result<Vec<_>>>()?;
        mean_kernel(&maps)
    }

    /// Head inputs of `id` correlated with `kernel`.
    pub fn cell_inputs(&self, id: &str, kernel: &Kernel, context: usize) -> Result<CellInputs> {
        let corr = self.correlate(id, kernel)?;
        Ok(CellInputs::new(&corr, context))
    }

    /// Highest-probability detection on `id`, box in original pixels.
    pub fn infer(&self, id: &str, kernel: &Kernel, head: &HeadParams, anchors: &AnchorConfig) -> Result<Detection> {
        let im = self.get(id)?;
        let inputs = self.cell_inputs(id, kernel, head.dims().context)?;
        let mut det = best_detection(&inputs, head, anchors, im.y_size())?;
        det.bbox = im.from_y(&det.bbox);
        Ok(det)
    }

    /// Every anchor's detection on `id`, boxes in original pixels.
    pub fn detect_all(&self, id: &str, kernel: &Kernel, head: &HeadParams, anchors: &AnchorConfig) -> Result<Vec<Detection>> {
        let im = self.get(id)?;
        let inputs = self.cell_inputs(id, kernel, head.dims().context)?;
        let (mut dets, _) = detect_inputs(&inputs, head, anchors, im.y_size())?;
        for d in &mut dets {
            d.bbox = im.from_y(&d.bbox);
            d.mask = None;
        }
        Ok(dets)
    }

    /// Ranks `corpus` against the crop of `(query image, box)`.
    pub fn search(&self, query_id: &str, image: &str, bbox: &BoundingBox, corpus: &[String], m: usize) -> Result<(RankList, bool)> {
        let kernel = self.kernel([(image, bbox)])?;
        let q = self.get(image)?;
        let yb = q.to_y(bbox);
        let items = corpus
            .iter()
            .map(|id| {
                let im = self.get(id)?;
                Ok(SearchImage {
                    id: &im.id,
                    features: &im.features,
                    scale: im.scale,
                    size: im.size(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        search_rank(
            &SearchQuery {
                id: query_id,
                kernel: &kernel,
                box_size: (yb.width(), yb.height()),
            },
            &items,
            m,
            self.stride(),
        )
    }

    /// Box-pooled, L2-normalised Y-side feature of `bbox` (original pixels).
    pub fn pooled(&self, id: &str, bbox: &BoundingBox) -> Result<Vec<f64>> {
        let im = self.get(id)?;
        Ok(crate::evalkit::pooled_feature(&im.features, &im.to_y(bbox), self.stride() as f64))
    }
}

/// Cells of `fm` whose centres fall inside `window` (in map pixels), as a
/// map of their bounding grid; at least the nearest cell.
fn y_subgrid(fm: &FeatureMap, window: &BoundingBox, stride: f64) -> Result<FeatureMap> {
    let cells = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / stride - 0.5).ceil().max(0.0) as usize).min(n - 1);
        let b = ((hi / stride - 0.5).ceil().max(0.0) as usize).min(n);
        if b > a {
            (a, b)
        } else {
            let c = (((lo + hi) / 2.0 / stride).floor().max(0.0) as usize).min(n - 1);
            (c, c + 1)
        }
    };
    let (i0, i1) = cells(window.y_min, window.y_max, fm.height());
    let (j0, j1) = cells(window.x_min, window.x_max, fm.width());
    let mut data = Vec::with_capacity((i1 - i0) * (j1 - j0) * fm.channels());
    for i in i0..i1 {
        for j in j0..j1 {
            data.extend_from_slice(fm.cell(i, j));
        }
    }
    FeatureMap::new(i1 - i0, j1 - j0, fm.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y_dims_short_side() {
        let g = Geometry::default();
        assert_eq!(g.y_dims(64, 64), (128, 128, 2.0));
        let (w, h, _) = g.y_dims(100, 50);
        assert_eq!((w, h), (213, 107));
    }

    #[test]
    fn subgrid_bounds() {
        let fm = FeatureMap::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let sub = y_subgrid(&fm, &BoundingBox::new(0.0, 0.0, 16.0, 8.0).unwrap(), 8.0).unwrap();
        assert_eq!((sub.height(), sub.width()), (1, 2));
        assert_eq!(sub.data(), &[0.0, 1.0]);
        let tiny = y_subgrid(&fm, &BoundingBox::new(17.0, 17.0, 18.0, 18.0).unwrap(), 8.0).unwrap();
        assert_eq!(tiny.data(), &[10.0]);
    }
}
