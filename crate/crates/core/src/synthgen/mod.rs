//! Deterministic synthetic instance-search benchmark.
//!
//! Every query owns a template (or shares one with the other queries of its
//! category). The template is planted with jitter into the query image and
//! into a fraction of the query's candidate images; all images carry
//! distractor shapes and pixel noise. Boxes, masks and relevance are
//! recorded exactly.

mod render;

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BoundingBox;
use crate::config::KeyValues;
use crate::dataset::{
    write_json, write_jsonl, Annotation, Dataset, ImageRecord, QueryRecord, RelevanceRecord, ShotRecord,
    ANNOTATIONS_FILE, CATEGORIES_FILE, IMAGES_MANIFEST, QUERIES_MANIFEST, RELEVANCE_FILE, SHOTS_MANIFEST,
};
use crate::error::{Result, SpilError};
use crate::evalkit::RelevanceLabels;
use crate::image::{Image, Mask};

pub use render::Template;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Rect,
    Blob,
    Glyph,
    /// Cycles rect, blob, glyph over templates.
    Mixed,
}

impl FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rect" => Ok(Self::Rect),
            "blob" => Ok(Self::Blob),
            "glyph" => Ok(Self::Glyph),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown template kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Largest offset of the instance centre from the image centre, pixels.
    pub translation: f64,
    pub scale: (f64, f64),
    pub brightness: (f64, f64),
    /// Standard deviation of per-pixel Gaussian noise, grey levels.
    pub noise_sigma: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            translation: 20.0,
            scale: (0.85, 1.15),
            brightness: (0.9, 1.1),
            noise_sigma: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub image_width: usize,
    pub image_height: usize,
    pub queries: usize,
    /// Candidates per query.
    pub candidates: usize,
    pub positives_fraction: f64,
    pub template_kind: TemplateKind,
    /// Longer template side in pixels before scale jitter.
    pub template_size: usize,
    pub jitter: Jitter,
    pub distractors: usize,
    /// Instances of non-query templates planted in every image.
    pub decoys: usize,
    /// Size of the decoy template set.
    pub decoy_templates: usize,
    /// Number of shared templates; 0 gives every query its own.
    pub categories: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            image_width: 64,
            image_height: 64,
            queries: 20,
            candidates: 64,
            positives_fraction: 0.75,
            template_kind: TemplateKind::Mixed,
            template_size: 20,
            jitter: Jitter::default(),
            distractors: 3,
            decoys: 1,
            decoy_templates: 8,
            categories: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(SpilError::invalid(format!("field '{field}': {why}")));
        if self.image_width < 16 || self.image_height < 16 {
            return bad("image_width", "images must be at least 16x16");
        }
        if self.queries == 0 {
            return bad("queries", "must be at least 1");
        }
        if self.candidates < 2 {
            return bad("candidates", "must be at least 2");
        }
        if !(self.positives_fraction > 0.0 && self.positives_fraction <= 1.0) {
            return bad("positives_fraction", "must lie in (0, 1]");
        }
        if self.template_size < 4 {
            return bad("template_size", "must be at least 4");
        }
        let (lo, hi) = self.jitter.scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad("scale_min", "scale range must be positive and ordered");
        }
        let largest = (self.template_size as f64 * hi).ceil() as usize;
        if largest + 2 > self.image_width.min(self.image_height) {
            return bad("template_size", "template larger than the image");
        }
        let (blo, bhi) = self.jitter.brightness;
        if !(blo > 0.0 && blo <= bhi) {
            return bad("brightness_min", "brightness range must be positive and ordered");
        }
        if !(self.jitter.translation >= 0.0) {
            return bad("translation", "must be non-negative");
        }
        if !(self.jitter.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be non-negative");
        }
        if self.decoys > 0 && self.decoy_templates == 0 {
            return bad("decoy_templates", "decoys need at least one decoy template");
        }
        if self.categories > self.queries {
            return bad("categories", "cannot exceed the number of queries");
        }
        Ok(())
    }

    /// Reads a `key = value` spec; absent keys keep their defaults.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let mut s = Self::default();
        kv.set("seed", &mut s.seed)?;
        kv.set("image_width", &mut s.image_width)?;
        kv.set("image_height", &mut s.image_height)?;
        kv.set("queries", &mut s.queries)?;
        kv.set("candidates", &mut s.candidates)?;
        kv.set("positives_fraction", &mut s.positives_fraction)?;
        kv.set("template_kind", &mut s.template_kind)?;
        kv.set("template_size", &mut s.template_size)?;
        kv.set("translation", &mut s.jitter.translation)?;
        kv.set("scale_min", &mut s.jitter.scale.0)?;
        kv.set("scale_max", &mut s.jitter.scale.1)?;
        kv.set("brightness_min", &mut s.jitter.brightness.0)?;
        kv.set("brightness_max", &mut s.jitter.brightness.1)?;
        kv.set("noise_sigma", &mut s.jitter.noise_sigma)?;
        kv.set("distractors", &mut s.distractors)?;
        kv.set("decoys", &mut s.decoys)?;
        kv.set("decoy_templates", &mut s.decoy_templates)?;
        kv.set("categories", &mut s.categories)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    fn template_count(&self) -> usize {
        if self.categories == 0 {
            self.queries
        } else {
            self.categories
        }
    }

    fn template_of(&self, query: usize) -> usize {
        if self.categories == 0 {
            query
        } else {
            query % self.categories
        }
    }

    fn positives_per_query(&self) -> usize {
        ((self.candidates as f64 * self.positives_fraction).round() as usize).clamp(1, self.candidates)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub image: Image,
    pub gt_box: Option<BoundingBox>,
    pub gt_mask: Option<Mask>,
    /// Template index planted in the image.
    pub template: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub images: Vec<SynthImage>,
    pub queries: Vec<QueryRecord>,
    /// Template index of each query.
    pub query_templates: Vec<usize>,
    pub relevance: RelevanceLabels,
}

// stream ids keep template and image randomness independent of each other
const TEMPLATE_STREAM: u64 = 1 << 40;
const LAYOUT_STREAM: u64 = 1 << 41;
const DECOY_STREAM: u64 = 1 << 42;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn query_id(q: usize) -> String {
    format!("query_{q:03}")
}

pub fn category_name(t: usize) -> String {
    format!("cat{t}")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let templates: Vec<Template> = (0..spec.template_count())
        .map(|t| {
            let kind = match spec.template_kind {
                TemplateKind::Mixed => [TemplateKind::Rect, TemplateKind::Blob, TemplateKind::Glyph][t % 3],
                k => k,
            };
            Template::random(kind, spec.template_size, &mut stream_rng(spec.seed, TEMPLATE_STREAM + t as u64))
        })
        .collect();

    let decoy_set: Vec<Template> = (0..spec.decoy_templates)
        .map(|t| {
            let kind = [TemplateKind::Rect, TemplateKind::Blob, TemplateKind::Glyph][t % 3];
            Template::random(kind, spec.template_size, &mut stream_rng(spec.seed, DECOY_STREAM + t as u64))
        })
        .collect();

    // which candidates of each query carry the instance
    let n_pos = spec.positives_per_query();
    let positive: Vec<Vec<bool>> = (0..spec.queries)
        .map(|q| {
            let mut flags: Vec<bool> = (0..spec.candidates).map(|c| c < n_pos).collect();
            flags.shuffle(&mut stream_rng(spec.seed, LAYOUT_STREAM + q as u64));
            flags
        })
        .collect();

    let per_query = spec.candidates + 1;
    let mut images = Vec::with_capacity(spec.queries * per_query);
    let mut queries = Vec::with_capacity(spec.queries);
    for (q, planted) in positive.iter().enumerate() {
        let t = spec.template_of(q);
        for slot in 0..per_query {
            let stream = (q * per_query + slot) as u64;
            let mut rng = stream_rng(spec.seed, stream);
            let (id, plant) = if slot == 0 {
                (format!("img_q{q:03}"), true)
            } else {
                (format!("img_q{q:03}_c{:03}", slot - 1), planted[slot - 1])
            };
            let decoys: Vec<&Template> = (0..spec.decoys).map(|_| &decoy_set[rng.random_range(0..decoy_set.len())]).collect();
            let rendered = render::compose(spec, plant.then(|| &templates[t]), &decoys, &mut rng)?;
            if slot == 0 {
                queries.push(QueryRecord {
                    query_id: query_id(q),
                    image: id.clone(),
                    bbox: rendered.bbox.expect("query images carry the instance"),
                });
            }
            images.push(SynthImage {
                id,
                image: rendered.image,
                gt_box: rendered.bbox,
                gt_mask: rendered.mask,
                template: plant.then_some(t),
            });
        }
    }

    let query_templates: Vec<usize> = (0..spec.queries).map(|q| spec.template_of(q)).collect();
    let query_images: Vec<&str> = queries.iter().map(|q| q.image.as_str()).collect();
    let mut relevance = RelevanceLabels::new();
    for (q, rec) in queries.iter().enumerate() {
        let rel = images
            .iter()
            .filter(|im| im.template == Some(query_templates[q]) && !query_images.contains(&im.id.as_str()))
            .map(|im| im.id.clone());
        relevance.insert(&rec.query_id, rel);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        images,
        queries,
        query_templates,
        relevance,
    })
}

/// Writes images (PPM), ground-truth masks (PGM) and manifests. With
/// categories, the few-shot files are written too: queries become shots.
pub fn export(ds: &SynthDataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| SpilError::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        let rel = format!("images/{}.ppm", im.id);
        im.image.write_ppm(&dir.join(&rel))?;
        if let Some(m) = &im.gt_mask {
            m.write_pgm(&dir.join(format!("masks/{}.pgm", im.id)))?;
        }
        records.push(ImageRecord {
            id: im.id.clone(),
            path: rel,
            gt_box: im.gt_box,
        });
    }
    write_jsonl(&dir.join(IMAGES_MANIFEST), &records)?;
    write_jsonl(&dir.join(QUERIES_MANIFEST), &ds.queries)?;
    let rel: Vec<RelevanceRecord> = ds
        .queries
        .iter()
        .map(|q| RelevanceRecord {
            query_id: q.query_id.clone(),
            relevant: ds.relevance.relevant(&q.query_id).cloned().collect(),
        })
        .collect();
    write_jsonl(&dir.join(RELEVANCE_FILE), &rel)?;

    if ds.spec.categories > 0 {
        let names: Vec<String> = (0..ds.spec.categories).map(category_name).collect();
        write_json(&dir.join(CATEGORIES_FILE), &names)?;
        let shots: Vec<ShotRecord> = ds
            .queries
            .iter()
            .zip(&ds.query_templates)
            .map(|(q, t)| ShotRecord {
                category: category_name(*t),
                image: q.image.clone(),
                bbox: q.bbox,
            })
            .collect();
        write_jsonl(&dir.join(SHOTS_MANIFEST), &shots)?;
        let shot_images: Vec<&str> = ds.queries.iter().map(|q| q.image.as_str()).collect();
        let ann: Vec<Annotation> = ds
            .images
            .iter()
            .filter(|im| !shot_images.contains(&im.id.as_str()))
            .filter_map(|im| {
                Some(Annotation {
                    image: im.id.clone(),
                    category: category_name(im.template?),
                    bbox: im.gt_box?,
                })
            })
            .collect();
        write_jsonl(&dir.join(ANNOTATIONS_FILE), &ann)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}

/// Draws a value uniformly from `[lo, hi]` (exactly `lo` when equal).
pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
