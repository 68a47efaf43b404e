//! Counterfactual instruction augmentation for language-conditioned
//! navigation datasets: atomic segmentation, hindsight labeling,
//! counterfactual branching, action tokenization, entropy diagnostics and a
//! 2D simulator to evaluate the result.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hash;
pub mod model;
pub mod policy;
pub mod seed;
pub mod segment;
pub mod codec;
pub mod entropy;
pub mod annotate;
pub mod hindsight;
pub mod counterfactual;
pub mod text;
pub mod sim;
pub mod artifact;
pub mod pipeline;

pub use annotate::{Annotator, AnnotatorRequest, AnnotatorResponse};
pub use codec::CodecConfig;
pub use entropy::EntropyReport;
pub use error::{Error, Result};
pub use model::{
    Action, AtomicLabel, Branch, InstructionLabel, LabeledExample, Observation, Payload, Pose, Provenance, Segment,
    Trajectory,
};
pub use pipeline::{Pipeline, PipelineConfig, Stage};
pub use policy::{ActionChunk, PolicyModel};
pub use segment::SegmenterConfig;
