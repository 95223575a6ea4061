//! Anchor-grid localization heads over a correlation map, their loss and
//! training step.

pub mod anchors;
pub mod checkpoint;
pub mod head;
pub mod loss;
pub mod nms;

pub use anchors::{decode, encode, propose_anchors, AnchorConfig};
pub use head::{
    best_detection, detect, detect_inputs, mask_grid, sigmoid, CellInputs, Detection, HeadDims, HeadParams,
    MaskGrid,
};
pub use loss::{
    accumulate_loss, gradient_check, match_targets, prepare_target, sgd_step, total_loss, AnchorLabel, GridGeometry,
    LossBreakdown, MatchConfig, Polarity, PreparedTarget, Target,
};
pub use nms::nms;
