//! Vision-language introspection: detect grounding conflicts during
//! decoding, localize the visual anchor, and steer away from context priors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod harness;
pub mod introspection;
pub mod model;
pub mod numerics;
pub mod steering;
pub mod synthetic;

pub use attention::{
    calibrate_expert_heads, extract_anchor_mask, purified_heatmap, AnchorMask, ExpertHead,
    ExpertHeadSet, Heatmap, ValidationRecord,
};
pub use error::{Result, VliError};
pub use introspection::{conflict_score, detect_conflict, dual_path_step, ConflictReport};
pub use model::{
    Model, ModelConfig, PatchGrid, Provenance, SteeringPlan, StepTrace, VisualFeatures,
};
pub use numerics::{LogitVector, TokenDistribution};
pub use steering::{
    vli_decode_step, vli_generate, InpaintSpec, VliConfig, VliDecoder, VliStepReport,
};
