//! On-disk dataset layout and manifest records.
//!
//! ```text
//! images.jsonl       {"id", "path", "gt_box": [x0,y0,x1,y1] | null}
//! queries.jsonl      {"query_id", "image", "box"}
//! relevance.jsonl    {"query_id", "relevant": [image ids]}
//! shots.jsonl        {"category", "image", "box"}        (few-shot only)
//! annotations.jsonl  {"image", "category", "box"}        (few-shot only)
//! categories.json    ["name", ...]                       (few-shot only)
//! ```
//!
//! Image paths are relative to the dataset directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::evalkit::RelevanceLabels;
use crate::image::Image;

pub const IMAGES_MANIFEST: &str = "images.jsonl";
pub const QUERIES_MANIFEST: &str = "queries.jsonl";
pub const RELEVANCE_FILE: &str = "relevance.jsonl";
pub const SHOTS_MANIFEST: &str = "shots.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const CATEGORIES_FILE: &str = "categories.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub gt_box: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub query_id: String,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub category: String,
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| SpilError::parse(path, format!("line {}: {e}", n + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| SpilError::parse(path, e.to_string()))?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| SpilError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SpilError::parse(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| SpilError::parse(path, e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| SpilError::io(path, e))
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: Vec<ImageRecord>,
    pub queries: Vec<QueryRecord>,
    pub relevance: RelevanceLabels,
}

impl Dataset {
    /// Reads the image and query manifests (both required) and the relevance
    /// file when present, checking that every reference resolves.
    pub fn load(root: &Path) -> Result<Self> {
        let images: Vec<ImageRecord> = read_jsonl(&root.join(IMAGES_MANIFEST))?;
        let queries: Vec<QueryRecord> = read_jsonl(&root.join(QUERIES_MANIFEST))?;
        let mut relevance = RelevanceLabels::new();
        let rel_path = root.join(RELEVANCE_FILE);
        if rel_path.exists() {
            for r in read_jsonl::<RelevanceRecord>(&rel_path)? {
                relevance.insert(&r.query_id, r.relevant);
            }
        }
        let ds = Self {
            root: root.to_path_buf(),
            images,
            queries,
            relevance,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Image manifest only; used for bare corpora.
    pub fn load_images(root: &Path) -> Result<Self> {
        let ds = Self {
            root: root.to_path_buf(),
            images: read_jsonl(&root.join(IMAGES_MANIFEST))?,
            queries: Vec::new(),
            relevance: RelevanceLabels::new(),
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let manifest = self.root.join(IMAGES_MANIFEST);
        let mut ids: Vec<&str> = self.images.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SpilError::parse(&manifest, format!("duplicate image id '{}'", w[0])));
        }
        for q in &self.queries {
            if self.record(&q.image).is_none() {
                return Err(SpilError::parse(
                    self.root.join(QUERIES_MANIFEST),
                    format!("query '{}' references unknown image '{}'", q.query_id, q.image),
                ));
            }
        }
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_image(&self, id: &str) -> Result<Image> {
        let rec = self
            .record(id)
            .ok_or_else(|| SpilError::invalid(format!("unknown image id '{id}'")))?;
        Image::read_ppm(&self.image_path(rec))
    }

    /// Ids of images not used as a query image, in manifest order.
    pub fn corpus_ids(&self) -> Vec<String> {
        self.images
            .iter()
            .filter(|r| !self.queries.iter().any(|q| q.image == r.id))
            .map(|r| r.id.clone())
            .collect()
    }
}
