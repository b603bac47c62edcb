//! Hierarchical open-set classification of windowed multichannel sensor
//! data.
//!
//! Classes are arranged in a binary tree built by agglomerative clustering
//! of class centroids. A small MLP emits one activation per tree node;
//! sibling groups are normalized with a softmax, the closed-set prediction
//! is the leaf with the largest path likelihood, and the mean decision
//! entropy along that path scores how unfamiliar a window is. Per-node
//! entropy thresholds stop traversal early, so an unknown activity is
//! reported as an internal node of the tree instead of a wrong leaf.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the type for callers that do not care.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod hierarchy;
pub mod inference;
pub mod model;
pub mod pipeline;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use dataset::{Fold, FoldPlan, Recording, Schema, Window};
pub use eval::{IdReport, LocalizationReport, OodReport};
pub use features::{FeatureConfig, FeatureKind, FeatureScaler, FeatureVector};
pub use hierarchy::{ClassCentroid, ExportFormat, Hierarchy, NodeId};
pub use inference::{OpenSetOutput, PathPrediction, ThresholdTable};
pub use model::{Checkpoint, ClassWeights, HeadParameters, NodeProbabilities, TrainConfig};
pub use pipeline::RunConfig;

pub type RecordingF64 = Recording<f64>;
pub type WindowF64 = Window<f64>;
pub type HierarchyF64 = Hierarchy<f64>;
pub type HeadParametersF64 = HeadParameters<f64>;
pub type CheckpointF64 = Checkpoint<f64>;
pub type ThresholdTableF64 = ThresholdTable<f64>;
pub type OpenSetOutputF64 = OpenSetOutput<f64>;

pub type RecordingF32 = Recording<f32>;
pub type WindowF32 = Window<f32>;
pub type HierarchyF32 = Hierarchy<f32>;
pub type HeadParametersF32 = HeadParameters<f32>;
pub type CheckpointF32 = Checkpoint<f32>;
pub type ThresholdTableF32 = ThresholdTable<f32>;
pub type OpenSetOutputF32 = OpenSetOutput<f32>;
