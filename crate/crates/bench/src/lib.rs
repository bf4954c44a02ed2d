//! Shared fixtures for the criterion benches.

use vli_core::attention::ExpertHeadSet;
use vli_core::harness::{Pipeline, RunConfig};
use vli_core::synthetic::{render_case, SceneCase, SceneParams};
use vli_core::VliConfig;

/// Default scene pipeline with calibrated experts.
pub struct Fixture {
    pub pipeline: Pipeline,
    pub experts: ExpertHeadSet,
    pub config: VliConfig,
}

impl Fixture {
    pub fn new() -> Self {
        let pipeline = Pipeline::prepare(&RunConfig::default()).expect("default pipeline");
        let experts = pipeline.calibrate().expect("calibration");
        let config = pipeline.vli_config();
        Self {
            pipeline,
            experts,
            config,
        }
    }

    pub fn case(&self, index: usize) -> SceneCase {
        let c = &self.pipeline.config;
        render_case(
            &SceneParams::default(),
            &self.pipeline.model.config,
            c.seed,
            index,
            None,
        )
        .expect("render")
    }

    /// First case of the seeded suite where the conflict gate fires.
    pub fn triggered_case(&self) -> SceneCase {
        (0..200)
            .map(|i| self.case(i))
            .find(|case| {
                let (_, r) = vli_core::vli_decode_step(
                    &self.pipeline.model,
                    &case.image,
                    &case.prompt(),
                    &self.experts,
                    &self.config,
                )
                .expect("decode");
                r.conflict.triggered && r.fallback.is_none()
            })
            .expect("suite has a triggered case")
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
