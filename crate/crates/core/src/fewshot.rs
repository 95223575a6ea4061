//! Few-shot detection by search.
//!
//! Every labelled shot is a search query; its rank list inherits the shot's
//! category. Rank lists of one category share a pool, and one self-paced run
//! trains a category-agnostic head on all categories at once (other
//! categories supply the contrastive pairs). Final detections come from
//! correlating each category's kernel with every corpus image. Query
//! expansion re-issues confident first-update pool boxes as extra shots and
//! trains again on the union of both rounds' rank lists.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::{Annotation, ShotRecord};
use crate::error::{Result, SpilError};
use crate::evalkit::{detection_ap, RankList, ScoredBox};
use crate::localizer::{nms, HeadParams};
use crate::pipeline::ImageBank;
use crate::selfpaced::{
    init_pool, run_training, union_ranklists, SamplePool, StageSnapshot, TrainInput, TrainQuery, TrainSettings,
};

/// Detections kept per image and category after non-maximum suppression.
pub const DETECTIONS_PER_IMAGE: usize = 3;

const EXPANSION_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub category: String,
    pub image: String,
    pub bbox: BoundingBox,
}

impl From<&ShotRecord> for Shot {
    fn from(r: &ShotRecord) -> Self {
        Self {
            category: r.category.clone(),
            image: r.image.clone(),
            bbox: r.bbox,
        }
    }
}

/// A shot's rank list with its category tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedRankList {
    pub category: String,
    pub ranklist: RankList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDetections {
    pub category: String,
    /// Per corpus image, detections by decreasing probability.
    pub images: Vec<(String, Vec<ScoredBox>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotSettings {
    pub topk: usize,
    pub nms_iou: f64,
    pub qe: bool,
    pub qe_limit: usize,
    pub seed: u64,
}

/// Fails when a shot names a category outside `categories`, or when there
/// are no shots.
pub fn validate_shots(shots: &[Shot], categories: &[String]) -> Result<()> {
    if shots.is_empty() {
        return Err(SpilError::invalid("no shots given"));
    }
    for s in shots {
        if !categories.contains(&s.category) {
            return Err(SpilError::invalid(format!(
                "shot on image '{}' has unknown category '{}'",
                s.image, s.category
            )));
        }
    }
    Ok(())
}

/// One search per shot over `corpus`, keeping the top `m`.
pub fn propagate_labels(bank: &ImageBank, shots: &[Shot], corpus: &[String], m: usize) -> Result<Vec<TaggedRankList>> {
    if shots.is_empty() {
        return Err(SpilError::invalid("label propagation needs at least one shot"));
    }
    shots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (ranklist, _) = bank.search(&format!("shot_{i:03}"), &s.image, &s.bbox, corpus, m)?;
            Ok(TaggedRankList {
                category: s.category.clone(),
                ranklist,
            })
        })
        .collect()
}

/// Pool with one group per category (the union of its rank lists) and the
/// training queries pointing at them.
pub fn category_pool(shots: &[Shot], lists: &[TaggedRankList]) -> Result<(SamplePool, Vec<TrainQuery>)> {
    let categories: BTreeSet<&str> = shots.iter().map(|s| s.category.as_str()).collect();
    let merged: Vec<RankList> = categories
        .iter()
        .map(|c| {
            let own: Vec<&RankList> = lists.iter().filter(|l| l.category == *c).map(|l| &l.ranklist).collect();
            union_ranklists(c, &own)
        })
        .collect();
    let pool = init_pool(&merged)?;
    let queries = shots
        .iter()
        .enumerate()
        .map(|(i, s)| TrainQuery {
            query_id: format!("shot_{i:03}"),
            image: s.image.clone(),
            bbox: s.bbox,
            group: pool.group_index(&s.category).expect("every shot category has a group"),
        })
        .collect();
    Ok((pool, queries))
}

/// Result of one propagate/refine round.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub head: HeadParams,
    pub pool: SamplePool,
    /// Pool after the first update, the most confident pseudo labels.
    pub first_update: SamplePool,
    pub detections: Vec<CategoryDetections>,
}

/// Self-paced training over the category pools, then detection on `corpus`.
#[allow(clippy::too_many_arguments)]
pub fn refine_categories<F>(
    bank: &ImageBank,
    shots: &[Shot],
    lists: &[TaggedRankList],
    corpus: &[String],
    train: &TrainSettings,
    nms_iou: f64,
    init_head: Option<HeadParams>,
    mut on_stage: F,
) -> Result<Refinement>
where
    F: FnMut(&StageSnapshot<'_>) -> Result<()>,
{
    let (pool, queries) = category_pool(shots, lists)?;
    let mut first_update = None;
    let outcome = run_training(
        TrainInput {
            bank,
            queries: &queries,
            pool,
            ground_truth: None,
            init_head,
        },
        train,
        None,
        |snap| {
            if first_update.is_none() {
                first_update = Some(snap.pool.clone());
            }
            on_stage(snap)
        },
    )?;
    let detections = detect_categories(bank, &outcome.head, &queries, &outcome.pool, corpus, train, nms_iou)?;
    Ok(Refinement {
        head: outcome.head,
        first_update: first_update.unwrap_or_else(|| outcome.pool.clone()),
        pool: outcome.pool,
        detections,
    })
}

/// Detections of every pool category on every corpus image. The kernel of a
/// category averages its shots and its model-boxed pool entries.
pub fn detect_categories(
    bank: &ImageBank,
    head: &HeadParams,
    queries: &[TrainQuery],
    pool: &SamplePool,
    corpus: &[String],
    train: &TrainSettings,
    nms_iou: f64,
) -> Result<Vec<CategoryDetections>> {
    pool.groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let crops = queries
                .iter()
                .filter(|q| q.group == g)
                .map(|q| (q.image.as_str(), &q.bbox))
                .chain(group.entries.iter().filter(|e| e.has_model_box).map(|e| (e.image_id.as_str(), &e.bbox)));
            let kernel = bank.kernel(crops)?;
            let images = corpus
                .par_iter()
                .map(|id| {
                    let dets = bank.detect_all(id, &kernel, head, &train.anchors)?;
                    let kept = nms(&dets, nms_iou)
                        .into_iter()
                        .take(DETECTIONS_PER_IMAGE)
                        .map(|d| ScoredBox {
                            score: d.probability,
                            bbox: d.bbox,
                        })
                        .collect();
                    Ok((id.clone(), kept))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CategoryDetections {
                category: group.group.clone(),
                images,
            })
        })
        .collect()
}

/// Up to `limit` model-boxed entries per original shot, drawn uniformly from
/// the shot's own rank list, as new shots of the same category. Images that
/// are already shots, or were drawn for an earlier shot, are skipped.
pub fn query_expansion(
    pool: &SamplePool,
    shots: &[Shot],
    lists: &[TaggedRankList],
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Shot>> {
    if limit == 0 {
        return Err(SpilError::invalid("query expansion limit must be at least 1"));
    }
    if shots.len() != lists.len() {
        return Err(SpilError::invalid("query expansion needs one rank list per shot"));
    }
    let mut taken: BTreeSet<&str> = shots.iter().map(|s| s.image.as_str()).collect();
    let mut out = Vec::new();
    for (shot, list) in shots.iter().zip(lists) {
        let Some(g) = pool.group_index(&shot.category) else { continue };
        let listed: BTreeSet<&str> = list.ranklist.entries.iter().map(|e| e.image_id.as_str()).collect();
        let eligible: Vec<_> = pool.groups[g]
            .entries
            .iter()
            .filter(|e| e.has_model_box && listed.contains(e.image_id.as_str()) && !taken.contains(e.image_id.as_str()))
            .collect();
        let mut idx = sample(rng, eligible.len(), limit.min(eligible.len())).into_vec();
        idx.sort_unstable();
        for i in idx {
            let e = eligible[i];
            taken.insert(&e.image_id);
            out.push(Shot {
                category: shot.category.clone(),
                image: e.image_id.clone(),
                bbox: e.bbox,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FewShotOutcome {
    pub base: Refinement,
    /// Shots added by query expansion.
    pub expanded_shots: Vec<Shot>,
    pub expanded: Option<Refinement>,
}

impl FewShotOutcome {
    /// Detections of the last round.
    pub fn detections(&self) -> &[CategoryDetections] {
        &self.expanded.as_ref().unwrap_or(&self.base).detections
    }
}

/// Propagate, refine and, with `settings.qe`, expand and refine again on the
/// union of both rounds' rank lists.
pub fn run_fewshot<F>(
    bank: &ImageBank,
    shots: &[Shot],
    corpus: &[String],
    train: &TrainSettings,
    settings: &FewShotSettings,
    init_head: Option<HeadParams>,
    mut on_stage: F,
) -> Result<FewShotOutcome>
where
    F: FnMut(usize, &StageSnapshot<'_>) -> Result<()>,
{
    let lists = propagate_labels(bank, shots, corpus, settings.topk)?;
    let base = refine_categories(bank, shots, &lists, corpus, train, settings.nms_iou, init_head.clone(), |s| on_stage(0, s))?;
    if !settings.qe {
        return Ok(FewShotOutcome {
            base,
            expanded_shots: Vec::new(),
            expanded: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(EXPANSION_STREAM);
    let extra = query_expansion(&base.first_update, shots, &lists, settings.qe_limit, &mut rng)?;
    let mut all_shots = shots.to_vec();
    all_shots.extend(extra.iter().cloned());
    let mut all_lists = lists;
    all_lists.extend(propagate_labels(bank, &extra, corpus, settings.topk).unwrap_or_default());
    let expanded = refine_categories(bank, &all_shots, &all_lists, corpus, train, settings.nms_iou, init_head, |s| {
        on_stage(1, s)
    })?;
    Ok(FewShotOutcome {
        base,
        expanded_shots: extra,
        expanded: Some(expanded),
    })
}

/// Per-category AP at `iou_thresh` over `images`, and their mean.
pub fn evaluate(
    detections: &[CategoryDetections],
    annotations: &[Annotation],
    images: &[String],
    iou_thresh: f64,
) -> Result<(BTreeMap<String, f64>, f64)> {
    let mut per_category = BTreeMap::new();
    for cd in detections {
        let by_image: BTreeMap<&str, &Vec<ScoredBox>> = cd.images.iter().map(|(id, d)| (id.as_str(), d)).collect();
        let mut dets = Vec::with_capacity(images.len());
        let mut gt = Vec::with_capacity(images.len());
        for id in images {
            dets.push(by_image.get(id.as_str()).map(|d| (*d).clone()).unwrap_or_default());
            gt.push(
                annotations
                    .iter()
                    .filter(|a| a.image == *id && a.category == cd.category)
                    .map(|a| a.bbox)
                    .collect(),
            );
        }
        per_category.insert(cd.category.clone(), detection_ap(&dets, &gt, iou_thresh)?);
    }
    let mean = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    Ok((per_category, mean))
}

/// A detection in COCO result format; `bbox` is `[x, y, width, height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: String,
    pub category_id: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn coco_detections(detections: &[CategoryDetections]) -> Vec<CocoDetection> {
    detections
        .iter()
        .flat_map(|cd| {
            cd.images.iter().flat_map(move |(id, dets)| {
                dets.iter().map(move |d| CocoDetection {
                    image_id: id.clone(),
                    category_id: cd.category.clone(),
                    bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.width(), d.bbox.height()],
                    score: d.score,
                })
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::RankEntry;
    use crate::selfpaced::{GroupPool, PoolEntry};

    fn b(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, x + 4.0, 4.0).unwrap()
    }

    fn shot(c: &str, im: &str) -> Shot {
        Shot {
            category: c.into(),
            image: im.into(),
            bbox: b(0.0),
        }
    }

    fn tagged(c: &str, q: &str, ids: &[&str]) -> TaggedRankList {
        TaggedRankList {
            category: c.into(),
            ranklist: RankList {
                query_id: q.into(),
                entries: ids
                    .iter()
                    .enumerate()
                    .map(|(i, id)| RankEntry {
                        image_id: id.to_string(),
                        bbox: b(1.0),
                        score: 1.0 - i as f64 * 0.1,
                    })
                    .collect(),
            },
        }
    }

    #[test]
    fn unknown_category_and_empty_shots_are_rejected() {
        let cats = vec!["a".to_string()];
        assert!(validate_shots(&[], &cats).is_err());
        assert!(validate_shots(&[shot("b", "i")], &cats).is_err());
        assert!(validate_shots(&[shot("a", "i")], &cats).is_ok());
    }

    #[test]
    fn category_pool_unions_lists_per_category() {
        let shots = [shot("a", "s0"), shot("a", "s1"), shot("b", "s2")];
        let lists = [tagged("a", "q0", &["x", "y"]), tagged("a", "q1", &["y", "z"]), tagged("b", "q2", &["w"])];
        let (pool, queries) = category_pool(&shots, &lists).unwrap();
        assert_eq!(pool.groups.len(), 2);
        let ids: BTreeSet<&str> = pool.groups[0].entries.iter().map(|e| e.image_id.as_str()).collect();
        assert_eq!(ids, ["x", "y", "z"].into_iter().collect());
        assert_eq!(queries.iter().map(|q| q.group).collect::<Vec<_>>(), vec![0, 0, 1]);
    }

    fn pool_with(entries: &[(&str, bool)]) -> SamplePool {
        SamplePool {
            groups: vec![GroupPool {
                group: "a".into(),
                entries: entries
                    .iter()
                    .map(|(id, m)| PoolEntry {
                        image_id: id.to_string(),
                        bbox: b(2.0),
                        weight: 1.0,
                        has_model_box: *m,
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn expansion_takes_only_model_boxes_up_to_limit() {
        let pool = pool_with(&[("x", true), ("y", false), ("z", true), ("w", true)]);
        let shots = [shot("a", "s0")];
        let lists = [tagged("a", "q0", &["x", "y", "z", "w"])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = query_expansion(&pool, &shots, &lists, 10, &mut rng).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|s| s.image != "y" && s.category == "a"));
        let two = query_expansion(&pool, &shots, &lists, 2, &mut rng).unwrap();
        assert_eq!(two.len(), 2);
        assert!(query_expansion(&pool, &shots, &lists, 0, &mut rng).is_err());
    }

    #[test]
    fn coco_boxes_are_corner_and_size() {
        let cd = CategoryDetections {
            category: "a".into(),
            images: vec![(
                "i".into(),
                vec![ScoredBox {
                    score: 0.5,
                    bbox: BoundingBox::new(1.0, 2.0, 4.0, 8.0).unwrap(),
                }],
            )],
        };
        let out = coco_detections(&[cd]);
        assert_eq!(out[0].bbox, [1.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn evaluate_scores_perfect_detections() {
        let cd = CategoryDetections {
            category: "a".into(),
            images: vec![("i".into(), vec![ScoredBox { score: 0.9, bbox: b(0.0) }]), ("j".into(), vec![])],
        };
        let ann = vec![Annotation {
            image: "i".into(),
            category: "a".into(),
            bbox: b(0.0),
        }];
        let (per, mean) = evaluate(&[cd], &ann, &["i".into(), "j".into()], 0.5).unwrap();
        assert!((per["a"] - 1.0).abs() < 1e-12);
        assert!((mean - 1.0).abs() < 1e-12);
    }
}
