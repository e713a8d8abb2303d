//! A tiny anchor-based BEV detector: pillarization, a convolutional
//! backbone, and a detection head with classification, box-regression,
//! direction, and IoU-prediction outputs.

mod anchors;
mod grid;
mod net;
mod predict;

pub use anchors::{assign_targets, AnchorAssignment, AnchorPrior, AnchorSet};
pub use grid::{pillarize, BevGrid, GridConfig};
pub use net::{
    forward, forward_values, init_detector_params, DetectorConfig, DetectorOutputs, RawOutputs,
    INPUT_CHANNELS,
};
pub use predict::{decode_outputs, predict};
