use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::coattention::{coattention_pipeline, CoAttentionParams};
use crate::error::{Result, SpilError};
use crate::localizer::loss::sgd_step_in_place;
use crate::localizer::{
    prepare_target, propose_anchors, total_loss, AnchorConfig, CellInputs, GridGeometry, HeadDims, HeadParams,
    LossBreakdown, MatchConfig, PreparedTarget, Target,
};
use crate::pipeline::ImageBank;
use crate::tensor::{mean_kernel, FeatureMap};

use super::pairs::{query_swap, sample_negative_pairs, sample_positive_pairs, TrainingPair, SWAP_PROBABILITY};
use super::pool::{pool_miou, update_pool, PoolGroundTruth, SamplePool};
use super::tau_schedule_from;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    /// Number of stages, `K + 1`.
    pub stages: usize,
    /// Stage-0 iterations at the first and second learning rate.
    pub stage0_iterations: (usize, usize),
    /// Iterations of every later stage at the two learning rates.
    pub stage_iterations: (usize, usize),
    /// The linear head sees small correlation responses, so its step sizes
    /// sit well above those of a deep detector.
    pub learning_rates: (f64, f64),
    pub positives: usize,
    pub negatives: usize,
    /// Couples the Y side with crops of another query under a null target.
    pub contrastive: bool,
    /// Threshold of the first pool update (`k = 1`).
    pub tau0: f64,
    pub swap_probability: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            stage0_iterations: (600, 150),
            stage_iterations: (350, 150),
            learning_rates: (1.0, 0.1),
            positives: 5,
            negatives: 5,
            contrastive: true,
            tau0: super::TAU_FIRST,
            swap_probability: SWAP_PROBABILITY,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpilError::invalid(m.to_string()));
        if self.stages == 0 {
            return bad("stages must be at least 1");
        }
        if self.stage0_iterations.0 + self.stage0_iterations.1 == 0
            || (self.stages > 1 && self.stage_iterations.0 + self.stage_iterations.1 == 0)
        {
            return bad("every stage needs at least one iteration");
        }
        if self.positives == 0 {
            return bad("positives per iteration must be at least 1");
        }
        let (a, b) = self.learning_rates;
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.tau0 > 0.0 && self.tau0 < 1.0) {
            return bad("tau0 must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.swap_probability) {
            return bad("swap probability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Iterations of stage `k` at the first and second learning rate.
    pub fn iterations(&self, k: usize) -> (usize, usize) {
        if k == 0 {
            self.stage0_iterations
        } else {
            self.stage_iterations
        }
    }

    pub fn total_iterations(&self) -> usize {
        (0..self.stages).map(|k| {
            let (a, b) = self.iterations(k);
            a + b
        }).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub stage: StageConfig,
    pub anchors: AnchorConfig,
    pub matching: MatchConfig,
    pub coattention: CoAttentionParams,
    /// Neighbourhood radius of the head input.
    pub context: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            stage: StageConfig::default(),
            anchors: AnchorConfig::default(),
            matching: MatchConfig::default(),
            coattention: CoAttentionParams::default(),
            context: 2,
        }
    }
}

/// A query with the pool group it trains against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainQuery {
    pub query_id: String,
    pub image: String,
    pub bbox: BoundingBox,
    pub group: usize,
}

pub struct TrainInput<'a> {
    pub bank: &'a ImageBank,
    pub queries: &'a [TrainQuery],
    pub pool: SamplePool,
    /// Enables pool mIoU logging.
    pub ground_truth: Option<&'a PoolGroundTruth>,
    /// Starting head; a fresh initialisation when absent.
    pub init_head: Option<HeadParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub stage: usize,
    pub iter: usize,
    pub loss: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub mask: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub tau: f64,
    pub updated_entries: usize,
    pub pool_miou_if_gt_available: Option<f64>,
}

/// State after a completed stage.
pub struct StageSnapshot<'a> {
    pub stage: usize,
    pub head: &'a HeadParams,
    pub pool: &'a SamplePool,
    pub log: &'a StageLog,
    pub iterations: &'a [IterLog],
}

/// Continue after stage `next_stage - 1` from its head and pool.
pub struct Resume {
    pub next_stage: usize,
    pub head: HeadParams,
    pub pool: SamplePool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: HeadParams,
    pub pool: SamplePool,
    pub iterations: Vec<IterLog>,
    pub stages: Vec<StageLog>,
    /// Pool mIoU before any update (the search boxes).
    pub initial_miou: Option<f64>,
}

fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

struct Trainer<'a> {
    bank: &'a ImageBank,
    queries: &'a [TrainQuery],
    settings: &'a TrainSettings,
    anchors: BTreeMap<(usize, usize), Vec<BoundingBox>>,
}

impl Trainer<'_> {
    fn anchors_for(&mut self, h: usize, w: usize) -> &[BoundingBox] {
        let cfg = &self.settings.anchors;
        self.anchors
            .entry((h, w))
            .or_insert_with(|| propose_anchors(h, w, cfg))
    }

    fn crop_maps(&self, pair: &TrainingPair) -> Result<Vec<FeatureMap>> {
        pair.x
            .iter()
            .map(|c| self.bank.crop_features(&c.image, &c.bbox))
            .collect()
    }

    /// Head inputs and prepared target of one pair.
    fn prepare<R: Rng + ?Sized>(&mut self, pair: &TrainingPair, rng: &mut R) -> Result<Option<(CellInputs, PreparedTarget)>> {
        if pair.x.is_empty() {
            return Ok(None);
        }
        let bank = self.bank;
        let y = bank.get(&pair.y.image)?;
        let maps = self.crop_maps(pair)?;
        let kernel = mean_kernel(&maps)?;
        let corr = bank.correlate(&y.id, &kernel)?;
        let inputs = CellInputs::new(&corr, self.settings.context);
        let target = match pair.y.bbox {
            Some(b) => {
                let yb = y.to_y(&b);
                let refs: Vec<&FeatureMap> = maps.iter().collect();
                let seg = bank.segmentation(&y.id)?;
                let mask = coattention_pipeline(
                    &y.y_image,
                    &y.features,
                    &refs,
                    &yb,
                    &self.settings.coattention,
                    Some(seg),
                )?;
                Target::positive(yb, Some(mask), pair.y.weight)
            }
            None => Target::negative(pair.y.weight),
        };
        let grid = GridGeometry {
            height: inputs.height(),
            width: inputs.width(),
            stride: bank.stride() as f64,
        };
        let types = self.settings.anchors.types();
        let matching = self.settings.matching;
        let anchors = self.anchors_for(inputs.height(), inputs.width());
        let prepared = prepare_target(anchors, types, &target, grid, &matching, rng);
        Ok(Some((inputs, prepared)))
    }

    fn iteration<R: Rng + ?Sized>(&mut self, k: usize, pool: &SamplePool, head: &mut HeadParams, lr: f64, rng: &mut R) -> Result<LossBreakdown> {
        let cfg = &self.settings.stage;
        let q = &self.queries[rng.random_range(0..self.queries.len())];
        let pair = sample_positive_pairs(pool, q.group, &q.image, &q.bbox, cfg.positives, rng)?;
        let pair = query_swap(pair, k, cfg.swap_probability, rng);
        let mut samples = Vec::with_capacity(2);
        samples.extend(self.prepare(&pair, rng)?);
        if cfg.contrastive && cfg.negatives > 0 && pool.groups.len() > 1 {
            let neg = sample_negative_pairs(pool, q.group, &pair.y.image, cfg.negatives, rng)?;
            samples.extend(self.prepare(&neg, rng)?);
        }
        let refs: Vec<(&CellInputs, &PreparedTarget)> = samples.iter().map(|(i, t)| (i, t)).collect();
        let (loss, grads) = total_loss(head, &refs);
        sgd_step_in_place(head, &grads, lr);
        Ok(loss)
    }

    /// Pool update after stage `k` with threshold `tau`.
    fn update(&self, pool: &mut SamplePool, head: &HeadParams, tau: f64) -> Result<usize> {
        let mut updated = 0;
        for g in 0..pool.groups.len() {
            let mut crops: Vec<(&str, &BoundingBox)> = self
                .queries
                .iter()
                .filter(|q| q.group == g)
                .map(|q| (q.image.as_str(), &q.bbox))
                .collect();
            let group = &pool.groups[g];
            crops.extend(
                group
                    .entries
                    .iter()
                    .filter(|e| e.has_model_box)
                    .map(|e| (e.image_id.as_str(), &e.bbox)),
            );
            if crops.is_empty() {
                continue;
            }
            let kernel = self.bank.kernel(crops)?;
            let dets = group
                .entries
                .par_iter()
                .map(|e| Ok((e.image_id.clone(), vec![self.bank.infer(&e.image_id, &kernel, head, &self.settings.anchors)?])))
                .collect::<Result<Vec<_>>>()?;
            let name = group.group.clone();
            updated += update_pool(pool, &name, &dets, tau)?;
        }
        Ok(updated)
    }
}

/// Runs stages `0..K` (or the remaining ones when resuming). After every
/// stage the pool is updated and `on_stage` receives the snapshot.
pub fn run_training<F>(input: TrainInput<'_>, settings: &TrainSettings, resume: Option<Resume>, mut on_stage: F) -> Result<TrainOutcome>
where
    F: FnMut(&StageSnapshot<'_>) -> Result<()>,
{
    let cfg = &settings.stage;
    cfg.validate()?;
    settings.anchors.validate()?;
    if input.queries.is_empty() {
        return Err(SpilError::invalid("training needs at least one query"));
    }
    if let Some(q) = input.queries.iter().find(|q| q.group >= input.pool.groups.len()) {
        return Err(SpilError::invalid(format!("query '{}' has no pool group", q.query_id)));
    }
    let dims = HeadDims {
        channels: input.bank.channels(),
        context: settings.context,
        anchor_types: settings.anchors.types(),
    };
    let (first, mut head, mut pool) = match resume {
        Some(r) => (r.next_stage, r.head, r.pool),
        None => (0, input.init_head.unwrap_or_else(|| HeadParams::init(dims)), input.pool),
    };
    if head.dims() != dims {
        return Err(SpilError::invalid("starting head does not match the feature and anchor configuration"));
    }
    let initial_miou = input.ground_truth.and_then(|gt| pool_miou(&pool, gt));

    let mut trainer = Trainer {
        bank: input.bank,
        queries: input.queries,
        settings,
        anchors: BTreeMap::new(),
    };
    let mut iterations = Vec::new();
    let mut stages = Vec::new();
    for k in first..cfg.stages {
        let mut rng = stage_rng(cfg.seed, k);
        let (hi, lo) = cfg.iterations(k);
        let start = iterations.len();
        for it in 0..hi + lo {
            let lr = if it < hi { cfg.learning_rates.0 } else { cfg.learning_rates.1 };
            let l = trainer.iteration(k, &pool, &mut head, lr, &mut rng)?;
            iterations.push(IterLog {
                stage: k,
                iter: it,
                loss: l.total,
                cls: l.cls,
                bbox: l.bbox,
                mask: l.mask,
            });
        }
        let tau = tau_schedule_from(k + 1, cfg.tau0)?;
        let updated = trainer.update(&mut pool, &head, tau)?;
        let log = StageLog {
            stage: k,
            tau,
            updated_entries: updated,
            pool_miou_if_gt_available: input.ground_truth.and_then(|gt| pool_miou(&pool, gt)),
        };
        on_stage(&StageSnapshot {
            stage: k,
            head: &head,
            pool: &pool,
            log: &log,
            iterations: &iterations[start..],
        })?;
        stages.push(log);
    }
    Ok(TrainOutcome {
        head,
        pool,
        iterations,
        stages,
        initial_miou,
    })
}
