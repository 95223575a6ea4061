//! Backbone stand-ins that turn an image into a [`FeatureMap`].
//!
//! Two providers are built in. `PatchStats` summarises every
//! `stride x stride` block by its centred mean colour and an 8-bin
//! gradient-orientation histogram (11 channels). `SeededConv` runs three
//! randomly initialised 3x3 convolutions with rectification. A third mode
//! reads precomputed maps from disk so real CNN features can be swapped in.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SpilError};
use crate::image::Image;
use crate::tensor::FeatureMap;

pub const PATCH_STATS_CHANNELS: usize = 11;
const ORIENTATION_BINS: usize = 8;
/// Mean gradient magnitude (grey levels per pixel) that maps to 1.0.
const GRADIENT_SCALE: f64 = 32.0;
const CONV_WEIGHT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMode {
    SeededConv,
    PatchStats,
    /// Directory of `<image id>.fm` text containers.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProviderConfig {
    pub mode: FeatureMode,
    pub seed: u64,
    /// Pixels per grid cell; one of 2, 4, 8.
    pub stride: usize,
    pub out_channels: usize,
}

impl Default for FeatureProviderConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::PatchStats,
            seed: 0,
            stride: 8,
            out_channels: PATCH_STATS_CHANNELS,
        }
    }
}

impl FeatureProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.stride) {
            return Err(SpilError::invalid(format!(
                "feature stride must be 2, 4 or 8 (got {})",
                self.stride
            )));
        }
        if self.out_channels < 4 {
            return Err(SpilError::invalid(format!(
                "feature out_channels must be at least 4 (got {})",
                self.out_channels
            )));
        }
        if self.mode == FeatureMode::PatchStats && self.out_channels != PATCH_STATS_CHANNELS {
            return Err(SpilError::invalid(format!(
                "patch-stats features have exactly {PATCH_STATS_CHANNELS} channels"
            )));
        }
        Ok(())
    }

    /// Grid size produced for an image of the given size.
    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

/// Computes the feature map of `image`. File mode has no image identity to
/// look up and is rejected here; use [`extract_features_for`].
pub fn extract_features(image: &Image, cfg: &FeatureProviderConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if image.width() < cfg.stride || image.height() < cfg.stride {
        return Err(SpilError::invalid(format!(
            "image {}x{} is smaller than stride {}",
            image.width(),
            image.height(),
            cfg.stride
        )));
    }
    match &cfg.mode {
        FeatureMode::PatchStats => Ok(patch_stats(image, cfg.stride)),
        FeatureMode::SeededConv => seeded_conv(image, cfg),
        FeatureMode::File(_) => Err(SpilError::invalid(
            "file-mode features are keyed by image id; use extract_features_for",
        )),
    }
}

/// Like [`extract_features`] but resolves file-mode maps by image id.
pub fn extract_features_for(id: &str, image: &Image, cfg: &FeatureProviderConfig) -> Result<FeatureMap> {
    match &cfg.mode {
        FeatureMode::File(dir) => {
            cfg.validate()?;
            let path = feature_file(dir, id);
            let fm = FeatureMap::read_text(&path)?;
            let (h, w) = cfg.grid_dims(image.width(), image.height());
            if (fm.height(), fm.width(), fm.channels()) != (h, w, cfg.out_channels) {
                return Err(SpilError::parse(
                    &path,
                    format!(
                        "map is {}x{}x{}, expected {h}x{w}x{}",
                        fm.height(),
                        fm.width(),
                        fm.channels(),
                        cfg.out_channels
                    ),
                ));
            }
            Ok(fm)
        }
        _ => extract_features(image, cfg),
    }
}

pub fn feature_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.fm"))
}

fn patch_stats(image: &Image, stride: usize) -> FeatureMap {
    let (w, h) = (image.width(), image.height());
    let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
    let luma = image.luma();
    let at = |x: usize, y: usize| luma[y * w + x];

    let mut data = vec![0.0; gh * gw * PATCH_STATS_CHANNELS];
    let mut counts = vec![0usize; gh * gw];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / stride) * gw + x / stride;
            let out = &mut data[cell * PATCH_STATS_CHANNELS..(cell + 1) * PATCH_STATS_CHANNELS];
            let p = image.pixel(x, y);
            for c in 0..3 {
                out[c] += p[c] as f64;
            }
            let gx = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
            let gy = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
            let mag = gx.hypot(gy);
            if mag > 0.0 {
                // unsigned orientation, linearly shared between the two nearest bins
                let theta = gy.atan2(gx).rem_euclid(PI);
                let pos = theta / PI * ORIENTATION_BINS as f64 - 0.5;
                let lo = pos.floor();
                let frac = pos - lo;
                let b0 = (lo as i64).rem_euclid(ORIENTATION_BINS as i64) as usize;
                let b1 = (b0 + 1) % ORIENTATION_BINS;
                out[3 + b0] += mag * (1.0 - frac);
                out[3 + b1] += mag * frac;
            }
            counts[cell] += 1;
        }
    }
    for (cell, n) in counts.iter().enumerate() {
        let n = *n as f64;
        let out = &mut data[cell * PATCH_STATS_CHANNELS..(cell + 1) * PATCH_STATS_CHANNELS];
        for v in &mut out[..3] {
            *v = *v / n / 127.5 - 1.0;
        }
        for v in &mut out[3..] {
            *v /= n * GRADIENT_SCALE;
        }
    }
    FeatureMap::new(gh, gw, PATCH_STATS_CHANNELS, data).expect("patch statistics are finite")
}

struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
}

impl ConvLayer {
    fn apply(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let oh = h.div_ceil(self.stride);
        let ow = w.div_ceil(self.stride);
        let mut out = vec![0.0; oh * ow * self.out_ch];
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = (oy * self.stride) as isize;
                let cx = (ox * self.stride) as isize;
                let dst = &mut out[(oy * ow + ox) * self.out_ch..(oy * ow + ox + 1) * self.out_ch];
                for ky in 0..3isize {
                    let y = cy + ky - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..3isize {
                        let x = cx + kx - 1;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src_off = (y as usize * w + x as usize) * self.in_ch;
                        let src = &input[src_off..src_off + self.in_ch];
                        for (o, d) in dst.iter_mut().enumerate() {
                            let base = ((o * self.in_ch) * 3 + ky as usize) * 3 + kx as usize;
                            let mut acc = 0.0;
                            for (i, s) in src.iter().enumerate() {
                                acc += self.weights[base + i * 9] * s;
                            }
                            *d += acc;
                        }
                    }
                }
                dst.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        (out, oh, ow)
    }
}

fn seeded_conv(image: &Image, cfg: &FeatureProviderConfig) -> Result<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, CONV_WEIGHT_SIGMA).expect("positive sigma");
    let widths = [3, 8, 16, cfg.out_channels];
    // downsample in the leading layers until the requested stride is reached
    let stride_layers = cfg.stride.trailing_zeros() as usize;
    let layers: Vec<ConvLayer> = (0..3)
        .map(|l| {
            let (in_ch, out_ch) = (widths[l], widths[l + 1]);
            ConvLayer {
                in_ch,
                out_ch,
                stride: if l < stride_layers { 2 } else { 1 },
                weights: (0..in_ch * out_ch * 9).map(|_| normal.sample(&mut rng)).collect(),
            }
        })
        .collect();

    let (mut h, mut w) = (image.height(), image.width());
    let mut x: Vec<f64> = image.data().iter().map(|v| *v as f64 / 255.0 - 0.5).collect();
    for layer in &layers {
        let (next, nh, nw) = layer.apply(&x, h, w);
        x = next;
        h = nh;
        w = nw;
    }
    FeatureMap::new(h, w, cfg.out_channels, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0, 0, 0]).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) * 3 % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn shapes_follow_stride() {
        let img = gradient_image(64, 64);
        for stride in [2, 4, 8] {
            let cfg = FeatureProviderConfig {
                stride,
                ..Default::default()
            };
            let fm = extract_features(&img, &cfg).unwrap();
            assert_eq!((fm.height(), fm.width(), fm.channels()), (64 / stride, 64 / stride, 11));
        }
        let odd = gradient_image(30, 21);
        let cfg = FeatureProviderConfig {
            mode: FeatureMode::SeededConv,
            out_channels: 6,
            stride: 4,
            ..Default::default()
        };
        let fm = extract_features(&odd, &cfg).unwrap();
        assert_eq!((fm.height(), fm.width(), fm.channels()), (6, 8, 6));
    }

    #[test]
    fn deterministic() {
        let img = gradient_image(40, 24);
        for mode in [FeatureMode::PatchStats, FeatureMode::SeededConv] {
            let cfg = FeatureProviderConfig {
                mode,
                seed: 11,
                stride: 4,
                out_channels: 11,
            };
            let a = extract_features(&img, &cfg).unwrap();
            let b = extract_features(&img, &cfg).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn constant_image_gives_constant_patch_stats() {
        // every block has mean colour (200, 100, 0) and zero gradient
        let img = Image::filled(32, 24, [200, 100, 0]).unwrap();
        let fm = extract_features(&img, &FeatureProviderConfig::default()).unwrap();
        let expected = [200.0 / 127.5 - 1.0, 100.0 / 127.5 - 1.0, -1.0];
        for cell in fm.cell_vectors() {
            for c in 0..3 {
                assert!((cell[c] - expected[c]).abs() < 1e-12);
            }
            assert!(cell[3..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn vertical_stripes_fill_the_horizontal_gradient_bin() {
        let mut img = Image::filled(16, 16, [0, 0, 0]).unwrap();
        for y in 0..16 {
            for x in (0..16).step_by(4) {
                img.set_pixel(x, y, [255, 255, 255]);
                img.set_pixel(x + 1, y, [255, 255, 255]);
            }
        }
        let fm = extract_features(&img, &FeatureProviderConfig { stride: 8, ..Default::default() }).unwrap();
        let cell = fm.cell(0, 0);
        // gradients point along x: theta = 0 sits between bins 7 and 0
        let hist = &cell[3..];
        let strongest = hist[0] + hist[7];
        assert!(strongest > 0.99 * hist.iter().sum::<f64>());
    }

    #[test]
    fn invalid_configs() {
        let img = gradient_image(16, 16);
        let bad_stride = FeatureProviderConfig { stride: 3, ..Default::default() };
        assert!(extract_features(&img, &bad_stride).is_err());
        let bad_channels = FeatureProviderConfig {
            mode: FeatureMode::SeededConv,
            out_channels: 3,
            ..Default::default()
        };
        assert!(extract_features(&img, &bad_channels).is_err());
        let file = FeatureProviderConfig {
            mode: FeatureMode::File(PathBuf::from("/nonexistent")),
            ..Default::default()
        };
        assert!(extract_features(&img, &file).is_err());
        assert!(extract_features_for("a", &img, &file).is_err());
    }

    #[test]
    fn file_mode_loads_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(16, 16);
        let fm = FeatureMap::filled(2, 2, 5, 0.25).unwrap();
        fm.write_text(&feature_file(dir.path(), "img7")).unwrap();
        let cfg = FeatureProviderConfig {
            mode: FeatureMode::File(dir.path().to_path_buf()),
            out_channels: 5,
            stride: 8,
            seed: 0,
        };
        assert_eq!(extract_features_for("img7", &img, &cfg).unwrap(), fm);
        let wrong = FeatureProviderConfig { stride: 4, ..cfg };
        assert!(extract_features_for("img7", &img, &wrong).is_err());
    }
}
