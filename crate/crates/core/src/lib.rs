//! Incompletely-supervised object counting with a positiveness-focused
//! grid detector.
//!
//! A handful of exemplar boxes per image seed a label set. Each stage trains
//! a grid detector whose loss stops treating unlabeled regions as background
//! after a fixed number of SGD iterations, predicts on the training images and
//! merges confident, non-overlapping detections into the label set. A final
//! detector is then trained on the expanded labels and evaluated for mAP@0.5
//! and counting error.
//!
//! Modules, bottom up:
//!
//! - [`geometry`]: boxes, IoU, non-maximum suppression.
//! - [`image`]: pixel buffers and the PGM/PPM codec.
//! - [`dataset`]: annotation files, subsampling, synthetic scenes.
//! - [`augment`]: training-time augmentation and the rotation sampler.
//! - [`detector`]: the grid model, target assignment, decoding, checkpoints.
//! - [`training`]: gated squared loss, analytic gradients, SGD.
//! - [`propagation`]: the stage loop and label merging.
//! - [`metrics`]: AP, MAE/RMSE, threshold selection, propagation quality.
//! - [`evaluate`]: running a model over a test set into an [`EvalReport`].
//! - [`benchmark`]: the SynthCount preset.

pub mod augment;
pub mod benchmark;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod propagation;
pub mod training;

pub use augment::AugmentConfig;
pub use dataset::{ImageRecord, LabelSet, LabeledBox, Provenance, SceneSpec, SubsampleSpec};
pub use detector::{GridModel, ObjectivenessMap};
pub use error::{Error, Result};
pub use evaluate::{evaluate_model, EvalConfig};
pub use geometry::{iou, nms, BBox, ScoredBox};
pub use image::Image;
pub use metrics::{CountingRecord, EvalReport, Objective, PropagationQuality};
pub use propagation::{run_propagation, StageLog, StageSchedule};
pub use training::{LossBreakdown, LossMode, TrainConfig, TrainState};
