//! Verification protocol and metrics: trial generation, DET curves with
//! EER / GAR@FAR readouts, and linear-logistic-regression score fusion.

mod det;
mod fusion;
mod trials;

pub use det::{compute_det, eer, gar_at_far, DetCurve};
pub use fusion::{apply_fusion, train_fusion, FusionModel, DEFAULT_FUSION_REG};
pub use trials::{
    build_trials, build_trials_indexed, build_training_trials, DatasetSplit, ImageRecord, Role,
    Trial, TrialSet,
};
