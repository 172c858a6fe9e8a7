//! Building blocks for benchmarking phase-conditioned Go Zone reasoning on
//! surgical video frames.
//!
//! - [`domain`]: phases, boxes, annotated samples and parsed outputs
//! - [`dataset`]: manifest loading, split checks, LabelMe import, phase statistics
//! - [`parsing`]: extraction of the phase answer and the structured reasoning answer
//! - [`rewards`]: scalar reward functions and their weighted sum
//! - [`metrics`]: grounding, conditioned and hardcore aggregates
//! - [`phasetool`]: phase definitions and the reasoning-turn prompt
//! - [`scoring`]: per-sample join of parsed outputs with ground truth

pub mod dataset;
pub mod domain;
pub mod metrics;
pub mod parsing;
pub mod phasetool;
pub mod rewards;
pub mod scoring;

pub use domain::{
    bbox_from_pixels, phase_from_letter, BoundingBox, DomainError, FrameSample, PerSampleEvaluation,
    RewardBreakdown, SurgicalPhase, Turn1Output, Turn2Output,
};
pub use metrics::{aggregate, EvalReport};
pub use phasetool::{PhaseTool, ToolMode};
pub use rewards::RewardConfig;
