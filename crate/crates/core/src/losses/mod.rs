//! Self-supervised loss stack.

pub mod occlusion;
pub mod photometric;
pub mod rigid;
pub mod stack;
pub mod total;

pub use occlusion::{occlusion_masks, ConsistencyThresholds, OcclusionMasks};
pub use photometric::{photometric_loss, smoothness_loss, MaskedLoss};
pub use rigid::{
    fit_regions, occlusion_loss, occlusion_regularization, reliable_mask, rigid_fit_svd, FitError, RegionFits,
    RegionMask, ReliableParams, RigidTransform,
};
pub use stack::{sequence_loss, IterationFields, LossConfig, LossViews, StereoFrame, TermWeights};
pub use total::{iteration_weight, total_loss, LossReport, LossWeights, OccTiming};
