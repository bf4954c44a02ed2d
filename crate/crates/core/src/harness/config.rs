use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    HeadAggregation, DEFAULT_NUM_EXPERTS, DEFAULT_RHO, DEFAULT_SINK_DIMS, DEFAULT_TAU_SINK,
};
use crate::error::{Result, VliError};
use crate::introspection::DEFAULT_THETA;
use crate::model::ModelConfig;
use crate::steering::{
    InpaintSpec, SinkFilter, VliConfig, DEFAULT_ALPHA, DEFAULT_EPSILON, DEFAULT_LAMBDA,
};

/// Inpainting strategy as named on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintKind {
    #[default]
    Mean,
    Zero,
    Noise,
}

impl std::str::FromStr for InpaintKind {
    type Err = VliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "zero" => Ok(Self::Zero),
            "noise" => Ok(Self::Noise),
            other => Err(VliError::config(
                "inpaint",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

/// Everything a run needs. Absent keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rho: f64,
    pub theta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub num_experts: usize,
    pub inpaint: InpaintKind,
    /// Seed of the noise inpainter.
    pub inpaint_seed: u64,
    pub aggregation: HeadAggregation,
    pub sink_filter: bool,
    pub tau_sink: f64,
    /// How many activation dimensions feed the sink score.
    pub sink_dims: usize,
    pub model: ModelConfig,
    /// Benchmark seed.
    pub seed: u64,
    pub n_cases: usize,
    /// Size and seed of the generated calibration set.
    pub n_validation: usize,
    pub validation_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            theta: DEFAULT_THETA,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            num_experts: DEFAULT_NUM_EXPERTS,
            inpaint: InpaintKind::Mean,
            inpaint_seed: 0,
            aggregation: HeadAggregation::RawSlice,
            sink_filter: false,
            tau_sink: DEFAULT_TAU_SINK,
            sink_dims: DEFAULT_SINK_DIMS,
            model: ModelConfig::default(),
            seed: 42,
            n_cases: 200,
            n_validation: 32,
            validation_seed: 7,
        }
    }
}

impl RunConfig {
    /// Check every invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.vli_config(vec![0]).validate()?;
        let heads = self.model.n_layers * self.model.n_heads;
        if self.num_experts == 0 || self.num_experts > heads {
            return Err(VliError::config(
                "num_experts",
                format!("must be in 1..={heads}"),
            ));
        }
        if self.sink_dims == 0 || self.sink_dims > self.model.d_model {
            return Err(VliError::config(
                "sink_dims",
                format!("must be in 1..={}", self.model.d_model),
            ));
        }
        if self.n_cases == 0 {
            return Err(VliError::config("n_cases", "must be >= 1"));
        }
        if self.n_validation == 0 {
            return Err(VliError::config("n_validation", "must be >= 1"));
        }
        Ok(())
    }

    pub fn inpaint_spec(&self) -> InpaintSpec {
        match self.inpaint {
            InpaintKind::Mean => InpaintSpec::MeanFill,
            InpaintKind::Zero => InpaintSpec::ZeroFill,
            InpaintKind::Noise => InpaintSpec::NoiseFill {
                seed: self.inpaint_seed,
            },
        }
    }

    /// Decode-step knobs; `sink_dims` is used only when the filter is on.
    pub fn vli_config(&self, sink_dims: Vec<usize>) -> VliConfig {
        VliConfig {
            rho: self.rho,
            theta: self.theta,
            alpha: self.alpha,
            lambda: self.lambda,
            epsilon: self.epsilon,
            inpaint: self.inpaint_spec(),
            aggregation: self.aggregation,
            sink_filter: self.sink_filter.then_some(SinkFilter {
                dims: sink_dims,
                tau: self.tau_sink,
            }),
        }
    }
}

/// Parse and validate a JSON config.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| VliError::config("config", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| VliError::config("config", "expected a JSON object"))?;
    // parse key by key so a bad value is reported against its own field
    for (key, v) in obj {
        let single = serde_json::Value::Object([(key.clone(), v.clone())].into_iter().collect());
        serde_json::from_value::<RunConfig>(single)
            .map_err(|e| VliError::config(key.clone(), e.to_string()))?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| VliError::config("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
