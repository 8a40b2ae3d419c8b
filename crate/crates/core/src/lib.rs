//! Toolkit for amodal instance segmentation at desk scale: run-length-encoded
//! binary masks, semantic amodal dataset I/O and construction, an
//! occlusion-aware AP/AR metric suite, and a small differentiable
//! occlusion-head model trained on synthetic shapes.

pub mod dataset;
pub mod eval;
pub mod mask;
pub mod model;
pub mod stats;
pub mod synth;

pub use dataset::{Dataset, DatasetFormat, InstanceAnnotation};
pub use eval::{evaluate, Detection, EvalConfig, EvalResult, MetricKind};
pub use mask::{BinaryMask, Polygon, Segmentation};
