use rand::seq::index::sample;
use rand::Rng;

use crate::bbox::BoundingBox;
use crate::error::{Result, SpilError};
use crate::localizer::Polarity;

use super::pool::{PoolEntry, SamplePool};

/// Probability that a positive pair swaps its Y side with an X-side
/// candidate from stage 1 on.
pub const SWAP_PROBABILITY: f64 = 0.5;

/// An X-side crop: image and the box the crop is centred on.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRef {
    pub image: String,
    pub bbox: BoundingBox,
    pub weight: f64,
    pub has_model_box: bool,
}

impl From<&PoolEntry> for CropRef {
    fn from(e: &PoolEntry) -> Self {
        Self {
            image: e.image_id.clone(),
            bbox: e.bbox,
            weight: e.weight,
            has_model_box: e.has_model_box,
        }
    }
}

/// The Y-side image with its target box (absent for negative pairs) and
/// loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct YSide {
    pub image: String,
    pub bbox: Option<BoundingBox>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub polarity: Polarity,
    pub y: YSide,
    pub x: Vec<CropRef>,
}

/// `n` entries of `group` drawn uniformly without replacement, coupled with
/// the query image and box at unit weight.
pub fn sample_positive_pairs<R: Rng + ?Sized>(
    pool: &SamplePool,
    group: usize,
    query_image: &str,
    query_box: &BoundingBox,
    n: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    let entries = &pool
        .groups
        .get(group)
        .ok_or_else(|| SpilError::invalid(format!("no pool group {group}")))?
        .entries;
    if n == 0 || n > entries.len() {
        return Err(SpilError::invalid(format!(
            "cannot sample {n} positives from a pool of {}",
            entries.len()
        )));
    }
    let mut idx = sample(rng, entries.len(), n).into_vec();
    idx.sort_unstable();
    Ok(TrainingPair {
        polarity: Polarity::Positive,
        y: YSide {
            image: query_image.to_string(),
            bbox: Some(*query_box),
            weight: 1.0,
        },
        x: idx.iter().map(|i| CropRef::from(&entries[*i])).collect(),
    })
}

/// Up to `n` crops from a uniformly chosen other group, skipping images that
/// also appear in the subject group; the target is null.
pub fn sample_negative_pairs<R: Rng + ?Sized>(
    pool: &SamplePool,
    group: usize,
    y_image: &str,
    n: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    let groups = pool.groups.len();
    if groups < 2 {
        return Err(SpilError::invalid("negative pairs need at least two queries"));
    }
    if group >= groups {
        return Err(SpilError::invalid(format!("no pool group {group}")));
    }
    let mut other = rng.random_range(0..groups - 1);
    if other >= group {
        other += 1;
    }
    let own = &pool.groups[group].entries;
    let eligible: Vec<&PoolEntry> = pool.groups[other]
        .entries
        .iter()
        .filter(|e| !own.iter().any(|o| o.image_id == e.image_id))
        .collect();
    let take = n.min(eligible.len());
    let mut idx = sample(rng, eligible.len(), take).into_vec();
    idx.sort_unstable();
    Ok(TrainingPair {
        polarity: Polarity::Negative,
        y: YSide {
            image: y_image.to_string(),
            bbox: None,
            weight: 1.0,
        },
        x: idx.iter().map(|i| CropRef::from(eligible[*i])).collect(),
    })
}

/// From stage 1 on, with probability `p` exchanges the Y side with one
/// X-side crop holding a model box; the old Y side takes its X-side slot.
pub fn query_swap<R: Rng + ?Sized>(pair: TrainingPair, k: usize, p: f64, rng: &mut R) -> TrainingPair {
    if k == 0 || pair.polarity != Polarity::Positive || !rng.random_bool(p) {
        return pair;
    }
    let eligible: Vec<usize> = (0..pair.x.len()).filter(|i| pair.x[*i].has_model_box).collect();
    if eligible.is_empty() {
        return pair;
    }
    let pick = eligible[rng.random_range(0..eligible.len())];
    let mut out = pair;
    let chosen = out.x[pick].clone();
    let old_y = std::mem::replace(
        &mut out.y,
        YSide {
            image: chosen.image,
            bbox: Some(chosen.bbox),
            weight: chosen.weight,
        },
    );
    out.x[pick] = CropRef {
        image: old_y.image,
        bbox: old_y.bbox.expect("positive pairs carry a box"),
        weight: old_y.weight,
        has_model_box: false,
    };
    out
}
