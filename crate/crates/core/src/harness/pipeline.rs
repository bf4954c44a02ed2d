use crate::attention::{calibrate_expert_heads, select_sink_dims, ExpertHeadSet, ValidationRecord};
use crate::error::Result;
use crate::model::{Model, VisualFeatures};
use crate::steering::VliConfig;
use crate::synthetic::{build_scene_model, validation_set, SceneModelParams, SceneParams};

use super::config::RunConfig;

/// Model, calibration set and the offline choices derived from it.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub model: Model,
    pub validation: Vec<ValidationRecord>,
    pub sink_dims: Vec<usize>,
}

impl Pipeline {
    /// Scene model for `config.model` plus a generated calibration set.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = build_scene_model(&SceneModelParams::default(), &config.model)?;
        let validation = validation_set(
            &SceneParams::default(),
            &model.config,
            config.validation_seed,
            config.n_validation,
        )?;
        Self::with_parts(config, model, validation)
    }

    pub fn with_parts(
        config: &RunConfig,
        model: Model,
        validation: Vec<ValidationRecord>,
    ) -> Result<Self> {
        config.validate()?;
        let features: Vec<VisualFeatures> = validation
            .iter()
            .map(|r| model.encode_visual(&r.image))
            .collect::<Result<_>>()?;
        let sink_dims = select_sink_dims(&features, config.sink_dims)?;
        Ok(Self {
            config: config.clone(),
            model,
            validation,
            sink_dims,
        })
    }

    pub fn calibrate(&self) -> Result<ExpertHeadSet> {
        calibrate_expert_heads(&self.model, &self.validation, self.config.num_experts)
    }

    pub fn vli_config(&self) -> VliConfig {
        self.config.vli_config(self.sink_dims.clone())
    }
}
