use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::tensor::{FeatureMap, Kernel};

/// Floor on cell norms in the cosine ranking score.
const NORM_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    pub query_id: String,
    pub entries: Vec<RankEntry>,
}

impl RankList {
    /// Checks the non-increasing score order and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.entries.windows(2).any(|w| w[1].score > w[0].score) {
            return Err(SpilError::invalid(format!(
                "rank list '{}' scores are not non-increasing",
                self.query_id
            )));
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.image_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SpilError::invalid(format!(
                "rank list '{}' repeats an image id",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// One rank list per line.
pub fn write_ranklists(path: &Path, lists: &[RankList]) -> Result<()> {
    let mut s = String::new();
    for l in lists {
        s.push_str(&serde_json::to_string(l).map_err(|e| SpilError::parse(path, e.to_string()))?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| SpilError::io(path, e))
}

pub fn read_ranklists(path: &Path) -> Result<Vec<RankList>> {
    let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let list: RankList =
            serde_json::from_str(line).map_err(|e| SpilError::parse(path, format!("line {}: {e}", n + 1)))?;
        list.validate().map_err(|e| SpilError::parse(path, e.to_string()))?;
        out.push(list);
    }
    Ok(out)
}

/// A corpus image as seen by the ranker: its feature map computed on a
/// resized copy, and the resize factor back to original pixels.
#[derive(Debug, Clone, Copy)]
pub struct SearchImage<'a> {
    pub id: &'a str,
    pub features: &'a FeatureMap,
    /// Resized pixels per original pixel.
    pub scale: f64,
    /// Original (width, height).
    pub size: (usize, usize),
}

/// Query side of a search: the crop kernel and the query box extent in
/// resized pixels.
#[derive(Debug, Clone)]
pub struct SearchQuery<'a> {
    pub id: &'a str,
    pub kernel: &'a Kernel,
    pub box_size: (f64, f64),
}

/// Peak score and peak cell of one map.
pub fn correlation_peak(kernel: &Kernel, fm: &FeatureMap) -> Result<(f64, usize)> {
    if kernel.channels() != fm.channels() {
        return Err(SpilError::invalid("search kernel and feature map channel counts differ"));
    }
    let kn = kernel.norm().max(NORM_FLOOR);
    let mut best = (f64::NEG_INFINITY, 0);
    for (idx, cell) in fm.cell_vectors().enumerate() {
        let dot: f64 = cell.iter().zip(kernel.values()).map(|(a, b)| a * b).sum();
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let s = dot / (kn * norm);
        if s > best.0 {
            best = (s, idx);
        }
    }
    Ok(best)
}

/// Correlation-peak ranker. Each image scores the best cosine between the
/// kernel and one of its cells; its box is a grid-aligned window of the
/// query's extent centred on that cell. Returns the top `m` (all when the
/// corpus is smaller, with the flag set).
pub fn search_rank(query: &SearchQuery<'_>, corpus: &[SearchImage<'_>], m: usize, stride: usize) -> Result<(RankList, bool)> {
    if corpus.is_empty() {
        return Err(SpilError::invalid("search corpus is empty"));
    }
    let st = stride as f64;
    let cells_w = (query.box_size.0 / st).ceil().max(1.0);
    let cells_h = (query.box_size.1 / st).ceil().max(1.0);
    let scored: Vec<Result<RankEntry>> = corpus
        .par_iter()
        .map(|img| {
            let (score, idx) = correlation_peak(query.kernel, img.features)?;
            let (i, j) = (idx / img.features.width(), idx % img.features.width());
            let (cx, cy) = ((j as f64 + 0.5) * st, (i as f64 + 0.5) * st);
            let window = BoundingBox::from_center(cx, cy, cells_w * st, cells_h * st);
            Ok(RankEntry {
                image_id: img.id.to_string(),
                bbox: window
                    .scale(1.0 / img.scale, 1.0 / img.scale)
                    .clip(img.size.0 as f64, img.size.1 as f64),
                score,
            })
        })
        .collect();
    let mut entries = scored.into_iter().collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    let truncated = m > entries.len();
    entries.truncate(m);
    Ok((
        RankList {
            query_id: query.id.to_string(),
            entries,
        },
        truncated,
    ))
}

/// Channel mean over the cells whose centres fall inside `bbox` (in pixels
/// of the image the map was computed on, `stride` pixels per cell), then
/// L2-normalised. A box containing no cell centre pools the cell nearest to
/// its centre.
pub fn pooled_feature(fm: &FeatureMap, bbox: &BoundingBox, stride: f64) -> Vec<f64> {
    let c = fm.channels();
    let mut acc = vec![0.0; c];
    let mut n = 0usize;
    for i in 0..fm.height() {
        for j in 0..fm.width() {
            if bbox.contains_point((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride) {
                acc.iter_mut().zip(fm.cell(i, j)).for_each(|(a, v)| *a += v);
                n += 1;
            }
        }
    }
    if n == 0 {
        let (cx, cy) = bbox.center();
        let j = ((cx / stride).floor().max(0.0) as usize).min(fm.width() - 1);
        let i = ((cy / stride).floor().max(0.0) as usize).min(fm.height() - 1);
        acc.copy_from_slice(fm.cell(i, j));
        n = 1;
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    normalize(&mut acc);
    acc
}

pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Reorders by descending dot product with `query` (stable on ties); the
/// similarity becomes the entry score. `features[i]` belongs to
/// `ranklist.entries[i]`.
pub fn rerank(ranklist: &RankList, query: &[f64], features: &[Vec<f64>]) -> Result<RankList> {
    if features.len() != ranklist.entries.len() {
        return Err(SpilError::invalid("rerank needs one feature per rank-list entry"));
    }
    let mut scored: Vec<(f64, &RankEntry)> = ranklist
        .entries
        .iter()
        .zip(features)
        .map(|(e, f)| (f.iter().zip(query).map(|(a, b)| a * b).sum(), e))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(RankList {
        query_id: ranklist.query_id.clone(),
        entries: scored
            .into_iter()
            .map(|(s, e)| RankEntry { score: s, ..e.clone() })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::avg_pool_spatial;

    fn list(n: usize) -> RankList {
        RankList {
            query_id: "q".into(),
            entries: (0..n)
                .map(|i| RankEntry {
                    image_id: format!("img{i}"),
                    bbox: BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn rerank_ties_keep_order() {
        let l = list(4);
        let out = rerank(&l, &[1.0], &vec![vec![0.5]; 4]).unwrap();
        let ids: Vec<_> = out.entries.iter().map(|e| e.image_id.clone()).collect();
        assert_eq!(ids, vec!["img0", "img1", "img2", "img3"]);
    }

    #[test]
    fn rerank_reverses() {
        let l = list(3);
        let feats = vec![vec![0.1], vec![0.2], vec![0.3]];
        let out = rerank(&l, &[1.0], &feats).unwrap();
        let ids: Vec<_> = out.entries.iter().map(|e| e.image_id.clone()).collect();
        assert_eq!(ids, vec!["img2", "img1", "img0"]);
        out.validate().unwrap();
    }

    #[test]
    fn full_box_pools_everything() {
        let fm = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 3.0, 1.0, 2.0, 2.0, 2.0, 1.0]).unwrap();
        let mut want = avg_pool_spatial(&fm).values().to_vec();
        normalize(&mut want);
        let got = pooled_feature(&fm, &BoundingBox::new(0.0, 0.0, 16.0, 16.0).unwrap(), 8.0);
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_box_uses_nearest_cell() {
        let fm = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = pooled_feature(&fm, &BoundingBox::new(9.0, 1.0, 10.0, 2.0).unwrap(), 8.0);
        assert_eq!(f, vec![1.0]);
    }

    #[test]
    fn self_ranks_first() {
        let a = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.9]).unwrap();
        let b = FeatureMap::new(2, 2, 2, vec![0.0, 1.0, 0.1, 1.0, 0.0, 0.3, 0.2, 0.9]).unwrap();
        let k = Kernel::new(vec![1.0, 0.0]).unwrap();
        let corpus = [
            SearchImage {
                id: "b",
                features: &b,
                scale: 1.0,
                size: (16, 16),
            },
            SearchImage {
                id: "a",
                features: &a,
                scale: 1.0,
                size: (16, 16),
            },
        ];
        let q = SearchQuery {
            id: "q",
            kernel: &k,
            box_size: (8.0, 8.0),
        };
        let (r, truncated) = search_rank(&q, &corpus, 5, 8).unwrap();
        assert!(truncated);
        assert_eq!(r.entries[0].image_id, "a");
        assert_eq!(r.entries[0].bbox.to_array(), [0.0, 0.0, 8.0, 8.0]);
        r.validate().unwrap();
    }

    #[test]
    fn json_shape() {
        let s = serde_json::to_string(&list(1)).unwrap();
        assert_eq!(
            s,
            r#"{"query_id":"q","entries":[{"image_id":"img0","box":[0.0,0.0,4.0,4.0],"score":1.0}]}"#
        );
    }
}
