//! Closed-form latent oracle and the rendered-scene benchmark.

mod bench;
mod scene;
mod theory;

pub use bench::{
    compare_sink_filter, run_pope_like_bench, run_pope_like_bench_with, run_pope_like_grid,
    AnswerStats, BenchReport, CaseLog, SinkComparison,
};
pub use scene::{
    build_scene_model, render_case, scene_model, scene_model_config, validation_set, SceneCase,
    SceneModelParams, SceneParams, N_CLASSES,
};
pub use theory::{
    check_orthogonality, ideal_states, make_scene, rectified_state, risk_ratio, snr_gain,
    IdealStates, SyntheticScene,
};
