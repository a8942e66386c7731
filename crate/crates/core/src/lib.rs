//! Dense out-of-distribution detection with flow-generated negative patches.
//!
//! A normalizing flow and a dense classifier are trained jointly: flow
//! samples are pasted into inlier images, the classifier is pushed toward
//! uniform predictions on pasted pixels, and the flow is pushed both toward
//! the inlier distribution and toward samples the classifier finds
//! ambiguous. At inference the per-pixel Jensen-Shannon divergence of the
//! temperature-scaled softmax to the uniform distribution is the anomaly
//! score.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod composer;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod scoring;
pub mod trainer;

pub use classifier::{predict_argmax, Activation, ClassifierArch, ClassifierModel, LogitMap};
pub use composer::{compose, compose_tensor, sample_batch_specs, sample_patch_spec, MixedBatch, PatchSpec};
pub use data::{
    load_manifest, read_score_map, write_score_map, Dataset, DatasetManifest, ImageTensor, LabelMap, RunConfig,
    ScoreMap, IGNORE_ID,
};
pub use divergence::{divergence_curve, divergence_to_uniform, DivergenceKind};
pub use error::{Error, Result};
pub use flow::{FlowArch, FlowMode, FlowModel};
pub use gan::{GanArch, GanLosses, GanPair};
pub use metrics::{
    auroc, average_precision, depth_binned_fpr, fpr_at_tpr, separation_histogram, ConfusionK1, DepthBins,
    EvalResult, OodAccumulator,
};
pub use scoring::{fuse, score_map, select_threshold, FusedPrediction, OodScoreKind};
