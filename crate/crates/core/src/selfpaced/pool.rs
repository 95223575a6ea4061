use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::evalkit::RankList;
use crate::localizer::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub weight: f64,
    pub has_model_box: bool,
}

/// Candidates of one query, or of all queries sharing a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPool {
    pub group: String,
    pub entries: Vec<PoolEntry>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplePool {
    pub groups: Vec<GroupPool>,
}

impl SamplePool {
    pub fn group_index(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.group == group)
    }

    pub fn entry_count(&self) -> usize {
        self.groups.iter().map(|g| g.entries.len()).sum()
    }
}

/// One group per rank list, entries in rank order with their search boxes,
/// unit weight and no model box.
pub fn init_pool(ranklists: &[RankList]) -> Result<SamplePool> {
    let mut groups = Vec::with_capacity(ranklists.len());
    for rl in ranklists {
        if rl.entries.is_empty() {
            return Err(SpilError::invalid(format!("rank list '{}' is empty", rl.query_id)));
        }
        rl.validate()?;
        groups.push(GroupPool {
            group: rl.query_id.clone(),
            entries: rl
                .entries
                .iter()
                .map(|e| PoolEntry {
                    image_id: e.image_id.clone(),
                    bbox: e.bbox,
                    weight: 1.0,
                    has_model_box: false,
                })
                .collect(),
        });
    }
    Ok(SamplePool { groups })
}

/// Merges rank lists under one query id: entries in order of first
/// appearance, the first occurrence of an image winning, re-sorted by score
/// (stable).
pub fn union_ranklists(query_id: &str, lists: &[&RankList]) -> RankList {
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for l in lists {
        for e in &l.entries {
            if seen.insert(e.image_id.clone()) {
                entries.push(e.clone());
            }
        }
    }
    entries.sort_by(|a: &crate::evalkit::RankEntry, b| b.score.total_cmp(&a.score));
    RankList {
        query_id: query_id.to_string(),
        entries,
    }
}

/// Box and probability of the most probable detection above `tau` (lowest
/// index on ties).
pub fn select_pseudo_gt(dets: &[Detection], tau: f64) -> Option<(BoundingBox, f64)> {
    let mut best: Option<&Detection> = None;
    for d in dets {
        if d.probability > tau && best.is_none_or(|b| d.probability > b.probability) {
            best = Some(d);
        }
    }
    best.map(|d| (d.bbox, d.probability))
}

/// Applies [`select_pseudo_gt`] per image of `group`; returns how many
/// entries changed.
pub fn update_pool(pool: &mut SamplePool, group: &str, per_image: &[(String, Vec<Detection>)], tau: f64) -> Result<usize> {
    let g = pool
        .group_index(group)
        .ok_or_else(|| SpilError::invalid(format!("unknown pool group '{group}'")))?;
    let entries = &mut pool.groups[g].entries;
    let mut updated = 0;
    for (image, dets) in per_image {
        let e = entries
            .iter_mut()
            .find(|e| e.image_id == *image)
            .ok_or_else(|| SpilError::invalid(format!("image '{image}' is not in pool '{group}'")))?;
        if let Some((bbox, p)) = select_pseudo_gt(dets, tau) {
            e.bbox = bbox;
            e.weight = p;
            e.has_model_box = true;
            updated += 1;
        }
    }
    Ok(updated)
}

/// Ground-truth boxes per group and image, for pool monitoring.
pub type PoolGroundTruth = BTreeMap<String, BTreeMap<String, BoundingBox>>;

/// Mean IoU of pool boxes over the entries that have a ground-truth box.
pub fn pool_miou(pool: &SamplePool, gt: &PoolGroundTruth) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for g in &pool.groups {
        let Some(boxes) = gt.get(&g.group) else { continue };
        for e in &g.entries {
            if let Some(b) = boxes.get(&e.image_id) {
                sum += e.bbox.iou(b);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
