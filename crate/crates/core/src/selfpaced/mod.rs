//! Self-paced training: the stage scheduler, the sample pool of
//! pseudo ground truths, pair sampling and query swapping.

pub mod pairs;
pub mod pool;
pub mod train;

pub use pairs::{query_swap, sample_negative_pairs, sample_positive_pairs, CropRef, TrainingPair, YSide};
pub use pool::{
    init_pool, pool_miou, select_pseudo_gt, union_ranklists, update_pool, GroupPool, PoolEntry, PoolGroundTruth,
    SamplePool,
};
pub use train::{run_training, IterLog, Resume, StageConfig, StageLog, StageSnapshot, TrainInput, TrainOutcome, TrainQuery, TrainSettings};

use crate::error::{Result, SpilError};

pub const TAU_FIRST: f64 = 0.99;
pub const TAU_STEP: f64 = 0.1;
pub const TAU_FLOOR: f64 = 0.5;

/// Confidence threshold for the pool update that feeds stage `k`:
/// `0.99 - 0.1 (k - 1)`, floored at 0.5.
pub fn tau_schedule(k: usize) -> Result<f64> {
    tau_schedule_from(k, TAU_FIRST)
}

/// The schedule with a different first-stage threshold.
pub fn tau_schedule_from(k: usize, first: f64) -> Result<f64> {
    if k == 0 {
        return Err(SpilError::invalid("stage 0 selects no pseudo ground truth; tau starts at k = 1"));
    }
    Ok((first - TAU_STEP * (k - 1) as f64).max(TAU_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert!(tau_schedule(0).is_err());
        assert_eq!(tau_schedule(1).unwrap(), 0.99);
        assert!((tau_schedule(2).unwrap() - 0.89).abs() < 1e-15);
        assert!((tau_schedule(3).unwrap() - 0.79).abs() < 1e-15);
        assert_eq!(tau_schedule(9).unwrap(), 0.5);
    }
}
