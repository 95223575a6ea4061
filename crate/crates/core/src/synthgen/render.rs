use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BoundingBox;
use crate::error::Result;
use crate::image::{Image, Mask};

use super::{uniform, SynthSpec, TemplateKind};

const BACKGROUND: f64 = 128.0;
/// Minimum distance of some channel from the background grey.
const MIN_CONTRAST: f64 = 60.0;

/// A colour pattern on a small grid; `None` cells are transparent.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<[f64; 3]>>,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let c = [
            rng.random_range(0..=255) as f64,
            rng.random_range(0..=255) as f64,
            rng.random_range(0..=255) as f64,
        ];
        if c.iter().any(|v| (v - BACKGROUND).abs() >= MIN_CONTRAST) {
            return c;
        }
    }
}

impl Template {
    pub fn random<R: Rng + ?Sized>(kind: TemplateKind, size: usize, rng: &mut R) -> Self {
        let aspect: f64 = rng.random_range(0.7..=1.4);
        let (w, h) = if aspect >= 1.0 {
            (size, ((size as f64 / aspect).round() as usize).max(4))
        } else {
            (((size as f64 * aspect).round() as usize).max(4), size)
        };
        let a = random_color(rng);
        let b = random_color(rng);
        let mut pixels = vec![None; w * h];
        match kind {
            TemplateKind::Rect | TemplateKind::Mixed => {
                let period = rng.random_range(3..=6);
                let orient = rng.random_range(0..3);
                for y in 0..h {
                    for x in 0..w {
                        let t = match orient {
                            0 => x,
                            1 => y,
                            _ => x + y,
                        };
                        pixels[y * w + x] = Some(if (t / period) % 2 == 0 { a } else { b });
                    }
                }
            }
            TemplateKind::Blob => {
                let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        let dx = (x as f64 + 0.5 - cx) / cx;
                        let dy = (y as f64 + 0.5 - cy) / cy;
                        let r = (dx * dx + dy * dy).sqrt();
                        if r <= 1.0 {
                            pixels[y * w + x] = Some([0, 1, 2].map(|c| a[c] * (1.0 - r) + b[c] * r));
                        }
                    }
                }
            }
            TemplateKind::Glyph => {
                const CELLS: usize = 4;
                let mut on = [[false; CELLS]; CELLS];
                for row in on.iter_mut() {
                    for v in row.iter_mut() {
                        *v = rng.random_bool(0.6);
                    }
                }
                // corners keep the footprint spanning the whole template
                on[0][0] = true;
                on[CELLS - 1][CELLS - 1] = true;
                for y in 0..h {
                    for x in 0..w {
                        let (i, j) = (y * CELLS / h, x * CELLS / w);
                        if on[i][j] {
                            pixels[y * w + x] = Some(if (i + j) % 2 == 0 { a } else { b });
                        }
                    }
                }
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }
}

pub(super) struct Rendered {
    pub image: Image,
    pub bbox: Option<BoundingBox>,
    pub mask: Option<Mask>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_shape(&mut self, region: &BoundingBox, ellipse: bool, color: [f64; 3]) {
        let (cx, cy) = region.center();
        let (rx, ry) = (region.width() / 2.0, region.height() / 2.0);
        for y in region.y_min.floor() as usize..(region.y_max.ceil() as usize).min(self.h) {
            for x in region.x_min.floor() as usize..(region.x_max.ceil() as usize).min(self.w) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !region.contains_point(px, py) {
                    continue;
                }
                if ellipse {
                    let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                self.px[y * self.w + x] = color;
            }
        }
    }
}

fn paint(canvas: &mut Canvas, t: &Template, region: &BoundingBox, bright: f64, mut mask: Option<&mut Mask>) {
    let (w, h) = (canvas.w, canvas.h);
    let (sx, sy) = (t.width as f64 / region.width(), t.height as f64 / region.height());
    for y in region.y_min.floor().max(0.0) as usize..(region.y_max.ceil() as usize).min(h) {
        for x in region.x_min.floor().max(0.0) as usize..(region.x_max.ceil() as usize).min(w) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !region.contains_point(px, py) {
                continue;
            }
            let tx = (((px - region.x_min) * sx) as usize).min(t.width - 1);
            let ty = (((py - region.y_min) * sy) as usize).min(t.height - 1);
            if let Some(c) = t.pixels[ty * t.width + tx] {
                canvas.px[y * w + x] = c.map(|v| v * bright);
                if let Some(m) = mask.as_deref_mut() {
                    m.set(x, y, true);
                }
            }
        }
    }
}

fn grown(b: &BoundingBox, margin: f64) -> BoundingBox {
    BoundingBox::from_center(b.center().0, b.center().1, b.width() + margin, b.height() + margin)
}

/// Renders one image: background, distractor shapes and decoy instances kept
/// clear of the instance, the jittered instance when given, then noise.
pub(super) fn compose<R: Rng + ?Sized>(
    spec: &SynthSpec,
    template: Option<&Template>,
    decoys: &[&Template],
    rng: &mut R,
) -> Result<Rendered> {
    let (w, h) = (spec.image_width, spec.image_height);
    let mut canvas = Canvas {
        w,
        h,
        px: vec![[BACKGROUND; 3]; w * h],
    };
    let j = &spec.jitter;

    // placement of the instance footprint
    let placement = template.map(|t| {
        let s = uniform(rng, j.scale.0, j.scale.1);
        let (tw, th) = (t.width as f64 * s, t.height as f64 * s);
        let cx = (w as f64 / 2.0 + uniform(rng, -j.translation, j.translation)).clamp(tw / 2.0 + 1.0, w as f64 - tw / 2.0 - 1.0);
        let cy = (h as f64 / 2.0 + uniform(rng, -j.translation, j.translation)).clamp(th / 2.0 + 1.0, h as f64 - th / 2.0 - 1.0);
        let bright = uniform(rng, j.brightness.0, j.brightness.1);
        (BoundingBox::from_center(cx.round(), cy.round(), tw, th), bright)
    });
    let keep_out = placement.map(|(b, _)| grown(&b, 4.0));

    for _ in 0..spec.distractors {
        let color = random_color(rng);
        let ellipse = rng.random_bool(0.5);
        for _attempt in 0..50 {
            let dw = uniform(rng, 6.0, 14.0);
            let dh = uniform(rng, 6.0, 14.0);
            let x0 = uniform(rng, 0.0, w as f64 - dw);
            let y0 = uniform(rng, 0.0, h as f64 - dh);
            let region = BoundingBox::from_center(x0 + dw / 2.0, y0 + dh / 2.0, dw, dh);
            if keep_out.is_none_or(|k| k.intersection_area(&region) == 0.0) {
                canvas.fill_shape(&region, ellipse, color);
                break;
            }
        }
    }

    let mut placed: Vec<BoundingBox> = keep_out.into_iter().collect();
    for t in decoys {
        let s = uniform(rng, j.scale.0, j.scale.1);
        let (tw, th) = (t.width as f64 * s, t.height as f64 * s);
        let bright = uniform(rng, j.brightness.0, j.brightness.1);
        for _attempt in 0..50 {
            let cx = uniform(rng, tw / 2.0 + 1.0, w as f64 - tw / 2.0 - 1.0).round();
            let cy = uniform(rng, th / 2.0 + 1.0, h as f64 - th / 2.0 - 1.0).round();
            let region = BoundingBox::from_center(cx, cy, tw, th);
            if placed.iter().all(|p| p.intersection_area(&region) == 0.0) {
                paint(&mut canvas, t, &region, bright, None);
                placed.push(grown(&region, 4.0));
                break;
            }
        }
    }

    let mut mask = None;
    if let (Some(t), Some((region, bright))) = (template, placement) {
        let mut m = Mask::empty(w, h);
        paint(&mut canvas, t, &region, bright, Some(&mut m));
        mask = Some(m);
    }

    let noise = Normal::new(0.0, j.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(w * h * 3);
    for p in &canvas.px {
        for v in p {
            let n = if j.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((v + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    let image = Image::new(w, h, data)?;
    let bbox = mask.as_ref().and_then(Mask::bounding_box);
    Ok(Rendered {
        image,
        bbox,
        mask: mask.filter(|m| m.count() > 0),
    })
}
