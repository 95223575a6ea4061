//! End-to-end wiring: run configuration, corpus search and the inputs of a
//! self-paced training run.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bbox::BoundingBox;
use crate::coattention::{CoAttentionParams, SegmentationParams};
use crate::config::KeyValues;
use crate::dataset::{Dataset, QueryRecord};
use crate::error::{Result, SpilError};
use crate::evalkit::{RankList, RelevanceLabels};
use crate::features::{FeatureMode, FeatureProviderConfig};
use crate::image::Image;
use crate::tensor::Correlation;
use crate::localizer::{AnchorConfig, MatchConfig};
use crate::pipeline::{Geometry, ImageBank};
use crate::selfpaced::{init_pool, PoolGroundTruth, SamplePool, StageConfig, TrainQuery, TrainSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Rank-list length M.
    pub topk: usize,
    pub features: FeatureProviderConfig,
    pub geometry: Geometry,
    pub segmentation: SegmentationParams,
    pub train: TrainSettings,
    /// How kernels meet Y-side maps in the localizer during instance search.
    pub correlation: Correlation,
    /// The same for category kernels in few-shot detection.
    pub fewshot_correlation: Correlation,
    pub nms_iou: f64,
    pub qe_limit: usize,
}

/// Cell norm below which cosine correlation stops amplifying a cell.
pub const DEFAULT_CORRELATION_FLOOR: f64 = 0.5;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topk: 128,
            features: FeatureProviderConfig::default(),
            geometry: Geometry::default(),
            segmentation: SegmentationParams::default(),
            train: TrainSettings::default(),
            correlation: Correlation::Raw,
            fewshot_correlation: Correlation::Cosine { floor: DEFAULT_CORRELATION_FLOOR },
            nms_iou: 0.5,
            qe_limit: 10,
        }
    }
}

impl RunConfig {
    /// Applies the seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.features.seed = seed;
        self.train.stage.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(SpilError::invalid("field 'topk': must be at least 1"));
        }
        self.features.validate()?;
        self.geometry.validate()?;
        self.segmentation.validate()?;
        self.train.stage.validate()?;
        self.train.anchors.validate()?;
        let m = &self.train.matching;
        if !(0.0 <= m.iou_neg && m.iou_neg <= m.iou_pos && m.iou_pos <= 1.0) {
            return Err(SpilError::invalid("fields 'iou_neg'/'iou_pos': need 0 <= iou_neg <= iou_pos <= 1"));
        }
        let t = self.train.coattention.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(SpilError::invalid("field 'coattention_threshold': must lie in [0, 1]"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(SpilError::invalid("field 'nms_iou': must lie in (0, 1]"));
        }
        for c in [self.correlation, self.fewshot_correlation] {
            if let Correlation::Cosine { floor } = c {
                if !(floor > 0.0 && floor.is_finite()) {
                    return Err(SpilError::invalid("field 'correlation_floor': must be positive"));
                }
            }
        }
        if self.qe_limit == 0 {
            return Err(SpilError::invalid("field 'qe_limit': must be at least 1"));
        }
        Ok(())
    }

    /// Reads a `key = value` file over the defaults.
    pub fn read(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::read(path)?;
        Self::from_key_values(&mut kv)
    }

    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        let mut seed = c.seed;
        kv.set("seed", &mut seed)?;
        c = c.with_seed(seed);
        kv.set("topk", &mut c.topk)?;

        let mut mode = String::from("patch-stats");
        kv.set("feature_mode", &mut mode)?;
        c.features.mode = match mode.as_str() {
            "patch-stats" => FeatureMode::PatchStats,
            "seeded-conv" => FeatureMode::SeededConv,
            "file" => {
                let mut dir = String::new();
                kv.set("feature_dir", &mut dir)?;
                if dir.is_empty() {
                    return Err(SpilError::parse(kv.source(), "field 'feature_dir': required in file mode"));
                }
                FeatureMode::File(dir.into())
            }
            other => {
                return Err(SpilError::parse(kv.source(), format!("field 'feature_mode': unknown mode '{other}'")));
            }
        };
        if c.features.mode != FeatureMode::PatchStats {
            c.features.out_channels = 16;
        }
        kv.set("feature_stride", &mut c.features.stride)?;
        kv.set("feature_channels", &mut c.features.out_channels)?;

        kv.set("y_short", &mut c.geometry.y_short)?;
        kv.set("crop_size", &mut c.geometry.crop_size)?;
        kv.set("crop_margin", &mut c.geometry.crop_margin)?;

        kv.set("segment_k", &mut c.segmentation.k)?;
        kv.set("segment_min_size", &mut c.segmentation.min_size)?;
        kv.set("segment_sigma", &mut c.segmentation.sigma)?;
        c.train.coattention = CoAttentionParams {
            segmentation: c.segmentation,
            threshold: c.train.coattention.threshold,
        };
        kv.set("coattention_threshold", &mut c.train.coattention.threshold)?;

        let s: &mut StageConfig = &mut c.train.stage;
        kv.set("stages", &mut s.stages)?;
        kv.set("stage0_iterations", &mut s.stage0_iterations.0)?;
        kv.set("stage0_iterations_low_lr", &mut s.stage0_iterations.1)?;
        kv.set("stage_iterations", &mut s.stage_iterations.0)?;
        kv.set("stage_iterations_low_lr", &mut s.stage_iterations.1)?;
        kv.set("learning_rate", &mut s.learning_rates.0)?;
        kv.set("learning_rate_low", &mut s.learning_rates.1)?;
        kv.set("positives", &mut s.positives)?;
        kv.set("negatives", &mut s.negatives)?;
        kv.set("contrastive", &mut s.contrastive)?;
        kv.set("tau0", &mut s.tau0)?;
        kv.set("swap_probability", &mut s.swap_probability)?;

        let a: &mut AnchorConfig = &mut c.train.anchors;
        kv.set_list("anchor_sizes", &mut a.sizes)?;
        kv.set_list("anchor_ratios", &mut a.ratios)?;
        a.stride = c.features.stride as f64;
        let m: &mut MatchConfig = &mut c.train.matching;
        kv.set("iou_pos", &mut m.iou_pos)?;
        kv.set("iou_neg", &mut m.iou_neg)?;
        kv.set("head_context", &mut c.train.context)?;
        let mut corr = String::from("raw");
        kv.set("correlation", &mut corr)?;
        let mut fewshot_corr = String::from("cosine");
        kv.set("fewshot_correlation", &mut fewshot_corr)?;
        let mut floor = DEFAULT_CORRELATION_FLOOR;
        kv.set("correlation_floor", &mut floor)?;
        let mode = |key: &str, v: &str| match v {
            "cosine" => Ok(Correlation::Cosine { floor }),
            "raw" => Ok(Correlation::Raw),
            other => Err(SpilError::parse(kv.source(), format!("field '{key}': unknown mode '{other}'"))),
        };
        c.correlation = mode("correlation", &corr)?;
        c.fewshot_correlation = mode("fewshot_correlation", &fewshot_corr)?;
        kv.set("nms_iou", &mut c.nms_iou)?;
        kv.set("qe_limit", &mut c.qe_limit)?;
        kv.finish()?;
        c.validate().map_err(|e| SpilError::parse(kv.source(), e.to_string()))?;
        Ok(c)
    }

    /// Documented keys with their current values, in file order.
    pub fn to_text(&self) -> String {
        let s = &self.train.stage;
        let mode = match &self.features.mode {
            FeatureMode::PatchStats => "patch-stats".to_string(),
            FeatureMode::SeededConv => "seeded-conv".to_string(),
            FeatureMode::File(d) => format!("file\nfeature_dir = {}", d.display()),
        };
        let name = |c: Correlation| match c {
            Correlation::Raw => "raw",
            Correlation::Cosine { .. } => "cosine",
        };
        let floor = match (self.correlation, self.fewshot_correlation) {
            (Correlation::Cosine { floor }, _) | (_, Correlation::Cosine { floor }) => floor,
            _ => DEFAULT_CORRELATION_FLOOR,
        };
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "seed = {}\ntopk = {}\nfeature_mode = {}\nfeature_stride = {}\nfeature_channels = {}\n\
             y_short = {}\ncrop_size = {}\ncrop_margin = {}\n\
             segment_k = {}\nsegment_min_size = {}\nsegment_sigma = {}\ncoattention_threshold = {}\n\
             stages = {}\nstage0_iterations = {}\nstage0_iterations_low_lr = {}\nstage_iterations = {}\n\
             stage_iterations_low_lr = {}\nlearning_rate = {}\nlearning_rate_low = {}\npositives = {}\n\
             negatives = {}\ncontrastive = {}\ntau0 = {}\nswap_probability = {}\n\
             anchor_sizes = {}\nanchor_ratios = {}\niou_pos = {}\niou_neg = {}\nhead_context = {}\n\
             correlation = {}\nfewshot_correlation = {}\ncorrelation_floor = {}\nnms_iou = {}\nqe_limit = {}\n",
            self.seed,
            self.topk,
            mode,
            self.features.stride,
            self.features.out_channels,
            self.geometry.y_short,
            self.geometry.crop_size,
            self.geometry.crop_margin,
            self.segmentation.k,
            self.segmentation.min_size,
            self.segmentation.sigma,
            self.train.coattention.threshold,
            s.stages,
            s.stage0_iterations.0,
            s.stage0_iterations.1,
            s.stage_iterations.0,
            s.stage_iterations.1,
            s.learning_rates.0,
            s.learning_rates.1,
            s.positives,
            s.negatives,
            s.contrastive,
            s.tau0,
            s.swap_probability,
            list(&self.train.anchors.sizes),
            list(&self.train.anchors.ratios),
            self.train.matching.iou_pos,
            self.train.matching.iou_neg,
            self.train.context,
            name(self.correlation),
            name(self.fewshot_correlation),
            floor,
            self.nms_iou,
            self.qe_limit,
        )
    }

    pub fn build_bank<F>(&self, ids: &[String], load: F) -> Result<ImageBank>
    where
        F: Fn(&str) -> Result<Image> + Sync,
    {
        Ok(ImageBank::build(ids, load, &self.features, &self.geometry, &self.segmentation)?.with_correlation(self.correlation))
    }

    /// Loads every image of a dataset directory into a bank.
    pub fn bank_for(&self, ds: &Dataset) -> Result<ImageBank> {
        let ids: Vec<String> = ds.images.iter().map(|r| r.id.clone()).collect();
        self.build_bank(&ids, |id| ds.load_image(id))
    }
}

/// One rank list per query over `corpus`.
pub fn search_queries(bank: &ImageBank, queries: &[QueryRecord], corpus: &[String], topk: usize) -> Result<Vec<RankList>> {
    queries
        .iter()
        .map(|q| Ok(bank.search(&q.query_id, &q.image, &q.bbox, corpus, topk)?.0))
        .collect()
}

/// Training queries for one-group-per-query instance search.
pub fn instance_queries(queries: &[QueryRecord], pool: &SamplePool) -> Result<Vec<TrainQuery>> {
    queries
        .iter()
        .map(|q| {
            let group = pool
                .group_index(&q.query_id)
                .ok_or_else(|| SpilError::invalid(format!("no rank list for query '{}'", q.query_id)))?;
            Ok(TrainQuery {
                query_id: q.query_id.clone(),
                image: q.image.clone(),
                bbox: q.bbox,
                group,
            })
        })
        .collect()
}

/// Ground truth for pool monitoring: per group, the relevant images that
/// have a box.
pub fn pool_ground_truth(
    groups: &[String],
    relevance: &RelevanceLabels,
    boxes: &BTreeMap<String, BoundingBox>,
) -> PoolGroundTruth {
    groups
        .iter()
        .map(|g| {
            let m = relevance
                .relevant(g)
                .filter_map(|id| boxes.get(id).map(|b| (id.clone(), *b)))
                .collect();
            (g.clone(), m)
        })
        .collect()
}

/// Everything a self-paced instance-search run needs, built from a bank.
pub struct InstanceSearch {
    pub ranklists: Vec<RankList>,
    pub pool: SamplePool,
    pub queries: Vec<TrainQuery>,
}

pub fn prepare_instance_search(
    bank: &ImageBank,
    queries: &[QueryRecord],
    corpus: &[String],
    topk: usize,
    ranklists: Option<Vec<RankList>>,
) -> Result<InstanceSearch> {
    let ranklists = match ranklists {
        Some(r) => r,
        None => search_queries(bank, queries, corpus, topk)?,
    };
    let pool = init_pool(&ranklists)?;
    let train_queries = instance_queries(queries, &pool)?;
    Ok(InstanceSearch {
        ranklists,
        pool,
        queries: train_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let c = RunConfig::default().with_seed(9);
        let mut kv = KeyValues::parse(&c.to_text(), Path::new("cfg")).unwrap();
        assert_eq!(RunConfig::from_key_values(&mut kv).unwrap(), c);
    }

    #[test]
    fn invalid_field_is_named() {
        let mut kv = KeyValues::parse("feature_stride = 3\n", Path::new("cfg")).unwrap();
        let err = RunConfig::from_key_values(&mut kv).unwrap_err().to_string();
        assert!(err.contains("stride"), "{err}");
    }
}
