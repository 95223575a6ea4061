//! Localization and retrieval metrics, the correlation-peak ranker and
//! box-pooled re-ranking.

pub mod metrics;
pub mod search;

pub use metrics::{
    average_precision, average_precision_of, curve_csv, detection_ap, interpolated_ap, iou, mean_average_precision,
    miou, recall_iou_curve, CurvePoint, RelevanceLabels, ScoredBox, DEFAULT_CURVE_THRESHOLDS,
};
pub use search::{
    correlation_peak, normalize, pooled_feature, read_ranklists, rerank, search_rank, write_ranklists, RankEntry,
    RankList, SearchImage, SearchQuery,
};
