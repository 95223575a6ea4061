//! RGB rasters, binary masks and the netpbm formats used on disk.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};

pub const MIN_IMAGE_SIDE: usize = 8;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(SpilError::invalid(format!(
                "image {width}x{height} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(SpilError::invalid(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma in `[0, 255]` (Rec. 601 weights).
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Bilinear sample with edge clamping; `(x, y)` in continuous pixel
    /// coordinates where pixel centres sit at half-integers.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let mut out = [0.0; 3];
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - ax) + p10[c] as f64 * ax;
            let bottom = p01[c] as f64 * (1.0 - ax) + p11[c] as f64 * ax;
            out[c] = top * (1.0 - ay) + bottom * ay;
        }
        out
    }

    /// Resample the region `window` (may extend past the border; edges are
    /// replicated) into a `width x height` image.
    pub fn crop_resize(&self, window: &BoundingBox, width: usize, height: usize) -> Result<Image> {
        let sx = window.width() / width as f64;
        let sy = window.height() / height as f64;
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let src_y = window.y_min + (y as f64 + 0.5) * sy;
            for x in 0..width {
                let src_x = window.x_min + (x as f64 + 0.5) * sx;
                let v = self.sample(src_x, src_y);
                data.extend(v.iter().map(|c| c.round().clamp(0.0, 255.0) as u8));
            }
        }
        Image::new(width, height, data)
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let full = BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width as f64,
            y_max: self.height as f64,
        };
        self.crop_resize(&full, width, height)
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| SpilError::io(path, e))?;
        let (header, offset) = parse_netpbm_header(&bytes, b"P6")
            .ok_or_else(|| SpilError::parse(path, "not a binary PPM (P6) with maxval 255"))?;
        let [w, h] = header;
        let need = w * h * 3;
        if bytes.len() < offset + need {
            return Err(SpilError::parse(path, "truncated PPM payload"));
        }
        Image::new(w, h, bytes[offset..offset + need].to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| SpilError::io(path, e))
    }
}

fn parse_netpbm_header(bytes: &[u8], magic: &[u8]) -> Option<([usize; 2], usize)> {
    if !bytes.starts_with(magic) {
        return None;
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    if fields[2] != 255 || pos >= bytes.len() {
        return None;
    }
    // single whitespace byte separates the header from the raster
    Some(([fields[0], fields[1]], pos + 1))
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(SpilError::invalid(format!(
                "mask has {} values, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Pixels whose centres fall inside `b`.
    pub fn from_box(width: usize, height: usize, b: &BoundingBox) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if b.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                    m.bits[y * width + x] = true;
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut lo = (usize::MAX, usize::MAX);
        let mut hi = (0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x + 1), hi.1.max(y + 1));
                }
            }
        }
        (lo.0 != usize::MAX).then_some(BoundingBox {
            x_min: lo.0 as f64,
            y_min: lo.1 as f64,
            x_max: hi.0 as f64,
            y_max: hi.1 as f64,
        })
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: usize, height: usize) -> Mask {
        let mut out = Mask::empty(width, height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.bits[y * width + x] = self.get(sx.min(self.width - 1), sy.min(self.height - 1));
            }
        }
        out
    }

    /// Binary PGM (P5), 0 for background and 255 for foreground.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|b| if *b { 255u8 } else { 0u8 }));
        let mut f = fs::File::create(path).map_err(|e| SpilError::io(path, e))?;
        f.write_all(&out).map_err(|e| SpilError::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Mask> {
        let bytes = fs::read(path).map_err(|e| SpilError::io(path, e))?;
        let ([w, h], offset) = parse_netpbm_header(&bytes, b"P5")
            .ok_or_else(|| SpilError::parse(path, "not a binary PGM (P5) with maxval 255"))?;
        if bytes.len() < offset + w * h {
            return Err(SpilError::parse(path, "truncated PGM payload"));
        }
        let bits = bytes[offset..offset + w * h].iter().map(|v| *v >= 128).collect();
        Mask::from_bits(w, h, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_images() {
        assert!(Image::filled(7, 20, [0, 0, 0]).is_err());
        assert!(Image::new(8, 8, vec![0; 10]).is_err());
    }

    #[test]
    fn ppm_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(9, 8, [10, 20, 30]).unwrap();
        img.set_pixel(3, 4, [255, 0, 7]);
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);

        let mut m = Mask::empty(9, 8);
        m.set(2, 5, true);
        let q = dir.path().join("m.pgm");
        m.write_pgm(&q).unwrap();
        assert_eq!(Mask::read_pgm(&q).unwrap(), m);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(16, 12, [40, 80, 120]).unwrap();
        let r = img.resize(32, 24).unwrap();
        assert!(r.data().chunks(3).all(|p| p == [40, 80, 120]));
    }

    #[test]
    fn box_mask_and_bounds() {
        let b = BoundingBox::new(2.0, 3.0, 6.0, 5.0).unwrap();
        let m = Mask::from_box(10, 10, &b);
        assert_eq!(m.count(), 8);
        assert_eq!(m.bounding_box().unwrap(), b);
    }
}
