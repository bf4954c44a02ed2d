//! Counterfactual construction, layer-wise steering, confidence calibration
//! and the per-step decode loop that chains them.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    extract_anchor_mask, mask_sinks, purified_heatmap_with, AnchorMask, ExpertHeadSet,
    HeadAggregation, DEFAULT_RHO,
};
use crate::error::{Result, VliError};
use crate::introspection::{conflict_report, ConflictReport, DEFAULT_THETA};
use crate::model::{
    Model, PatchGrid, Provenance, SteeringPlan, StepTrace, VisualFeatures, VisualPrefix,
};
use crate::numerics::{js_divergence, temperature_scale, LogitVector, TokenDistribution};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Largest `f64` strictly below 2; the calibration temperature never reaches 2.
const T_C_CEILING: f64 = 1.999_999_999_999_999_8;

/// Analytic stand-ins for an inpainting model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum InpaintSpec {
    /// Masked patches become the mean of the unmasked ones.
    #[default]
    MeanFill,
    ZeroFill,
    /// Gaussian noise scaled to the RMS of the unmasked patches.
    NoiseFill {
        seed: u64,
    },
}

/// Replace the patches selected by `mask`; everything else passes through.
pub fn inpaint(image: &PatchGrid, mask: &AnchorMask, spec: InpaintSpec) -> Result<PatchGrid> {
    let n = image.n_patches();
    if mask.len() != n {
        return Err(VliError::shape(format!(
            "mask of {} for {n} patches",
            mask.len()
        )));
    }
    let mut out = image.clone();
    if mask.k == 0 {
        return Ok(out);
    }
    let pd = image.patch_dim;
    let unmasked: Vec<usize> = (0..n).filter(|&i| !mask.bits[i]).collect();
    match spec {
        InpaintSpec::ZeroFill => {
            for i in mask.indices() {
                out.patch_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        InpaintSpec::MeanFill => {
            if unmasked.is_empty() {
                return Err(VliError::DegenerateInpaint(
                    "mean-fill needs at least one unmasked patch".into(),
                ));
            }
            let mut mean = vec![0.0; pd];
            for &i in &unmasked {
                for (m, v) in mean.iter_mut().zip(image.patch(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= unmasked.len() as f64);
            for i in mask.indices() {
                out.patch_mut(i).copy_from_slice(&mean);
            }
        }
        InpaintSpec::NoiseFill { seed } => {
            let scale = if unmasked.is_empty() {
                1.0
            } else {
                let ss: f64 = unmasked
                    .iter()
                    .flat_map(|&i| image.patch(i))
                    .map(|v| v * v)
                    .sum();
                (ss / (unmasked.len() * pd) as f64).sqrt()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in mask.indices() {
                for v in out.patch_mut(i) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Anchor-only and context-only features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPair {
    pub anchor_only: VisualFeatures,
    pub context_only: VisualFeatures,
}

/// `I_c` inpaints the anchor away, `I_a` inpaints everything but the anchor.
pub fn build_counterfactuals(
    model: &Model,
    image: &PatchGrid,
    mask: &AnchorMask,
    spec: InpaintSpec,
) -> Result<CounterfactualPair> {
    let context_img = inpaint(image, mask, spec)?;
    let anchor_img = inpaint(image, &mask.complement(), spec)?;
    let mut context_only = model.encode_visual(&context_img)?;
    context_only.provenance = Provenance::ContextOnly;
    let mut anchor_only = model.encode_visual(&anchor_img)?;
    anchor_only.provenance = Provenance::AnchorOnly;
    Ok(CounterfactualPair {
        anchor_only,
        context_only,
    })
}

/// `delta[l] = h_a[l] - h_c[l]` for every layer.
pub fn correction_vectors(trace_a: &StepTrace, trace_c: &StepTrace) -> Result<Vec<Vec<f64>>> {
    if trace_a.hidden.len() != trace_c.hidden.len() {
        return Err(VliError::shape("traces have different depth"));
    }
    trace_a
        .hidden
        .iter()
        .zip(&trace_c.hidden)
        .map(|(a, c)| {
            if a.len() != c.len() {
                return Err(VliError::shape("hidden widths differ"));
            }
            Ok(a.iter().zip(c).map(|(x, y)| x - y).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInputs {
    /// Global conflict between grounded and ungrounded outputs.
    pub c_gu: f64,
    /// Divergence between anchor-only and context-only outputs.
    pub c_ac: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

/// `1 + tanh(max(0, c_gu / (c_ac + eps) - lambda))`, kept strictly below 2.
pub fn calibration_temperature(inputs: CalibrationInputs) -> f64 {
    let ratio = inputs.c_gu / (inputs.c_ac + inputs.epsilon);
    let excess = (ratio - inputs.lambda).max(0.0);
    if excess == 0.0 {
        return 1.0;
    }
    // tanh saturates to exactly 1.0 in f64 for large arguments
    (1.0 + excess.tanh()).min(T_C_CEILING)
}

/// Temperature-scaled distribution of the debiased logits.
pub fn corrected_distribution(logits: &LogitVector, t_c: f64) -> Result<TokenDistribution> {
    temperature_scale(logits, t_c)
}

/// Optional explicit sink filtering before anchor extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkFilter {
    pub dims: Vec<usize>,
    pub tau: f64,
}

/// Knobs for one VLI decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VliConfig {
    pub rho: f64,
    pub theta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub inpaint: InpaintSpec,
    pub aggregation: HeadAggregation,
    pub sink_filter: Option<SinkFilter>,
}

impl Default for VliConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            theta: DEFAULT_THETA,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            inpaint: InpaintSpec::MeanFill,
            aggregation: HeadAggregation::RawSlice,
            sink_filter: None,
        }
    }
}

impl VliConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(VliError::config("rho", "must be in (0, 1]"));
        }
        if !(self.theta >= 0.0) || self.theta.is_nan() {
            return Err(VliError::config("theta", "must be >= 0"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(VliError::config("alpha", "must be finite and >= 0"));
        }
        if !(self.lambda >= 0.0) || self.lambda.is_nan() {
            return Err(VliError::config("lambda", "must be >= 0"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(VliError::config("epsilon", "must be finite and > 0"));
        }
        if let Some(f) = &self.sink_filter {
            if !(0.0..=1.0).contains(&f.tau) {
                return Err(VliError::config("tau_sink", "must be in [0, 1]"));
            }
            if f.dims.is_empty() {
                return Err(VliError::config(
                    "sink_dims",
                    "sink filter needs at least one dimension",
                ));
            }
        }
        Ok(())
    }
}

/// Everything observed during one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VliStepReport {
    pub conflict: ConflictReport,
    pub anchor: Option<AnchorMask>,
    pub c_ac: Option<f64>,
    pub t_c: f64,
    pub baseline_token: usize,
    pub vli_token: usize,
    pub delta_norms: Vec<f64>,
    /// Why the step fell back to the baseline token, if it did.
    pub fallback: Option<String>,
}

/// Anchor mask for a grounded trace, honouring the optional sink filter.
pub fn anchor_for_trace(
    trace_g: &StepTrace,
    grounded: &VisualFeatures,
    experts: &ExpertHeadSet,
    config: &VliConfig,
) -> Result<AnchorMask> {
    let mut heat = purified_heatmap_with(trace_g, experts, config.aggregation)?;
    if let Some(f) = &config.sink_filter {
        heat = mask_sinks(&heat, grounded, &f.dims, f.tau)?;
    }
    extract_anchor_mask(&heat, config.rho)
}

/// Config-independent part of a decode step: the grounded and ungrounded
/// passes over one text prefix.
#[derive(Debug, Clone)]
pub struct GroundedStep {
    pub trace_g: StepTrace,
    pub trace_u: StepTrace,
}

/// Anchor-only and context-only traces, memoized per anchor mask so that
/// configurations sharing a mask share the two forward passes.
#[derive(Debug, Default)]
pub struct CounterfactualMemo {
    entries: HashMap<(Vec<bool>, InpaintSpec), (StepTrace, StepTrace)>,
}

impl CounterfactualMemo {
    fn get_or_run(
        &mut self,
        model: &Model,
        image: &PatchGrid,
        text: &[usize],
        mask: &AnchorMask,
        spec: InpaintSpec,
    ) -> Result<&(StepTrace, StepTrace)> {
        let key = (mask.bits.clone(), spec);
        if !self.entries.contains_key(&key) {
            let pair = build_counterfactuals(model, image, mask, spec)?;
            // the two passes are independent
            let (a, c) = rayon::join(
                || model.forward_step(&pair.anchor_only, text, None),
                || model.forward_step(&pair.context_only, text, None),
            );
            self.entries.insert(key.clone(), (a?, c?));
        }
        Ok(&self.entries[&key])
    }
}

/// The grounded image as the decoder sees it.
#[derive(Debug, Clone)]
pub struct GroundedImage<'a> {
    pub image: &'a PatchGrid,
    pub visual: VisualFeatures,
    pub prefix: VisualPrefix,
}

impl<'a> GroundedImage<'a> {
    pub fn new(model: &Model, image: &'a PatchGrid) -> Result<Self> {
        let visual = model.encode_visual(image)?;
        let prefix = model.visual_prefix(&visual)?;
        Ok(Self {
            image,
            visual,
            prefix,
        })
    }
}

/// Decoder state shared across steps: the model, its experts, the config and
/// the cached null-image prefix used by every ungrounded pass.
#[derive(Debug, Clone)]
pub struct VliDecoder<'m> {
    model: &'m Model,
    experts: &'m ExpertHeadSet,
    null_prefix: VisualPrefix,
}

impl<'m> VliDecoder<'m> {
    pub fn new(model: &'m Model, experts: &'m ExpertHeadSet) -> Result<Self> {
        let null_prefix = model.visual_prefix(&model.null_visual())?;
        Ok(Self {
            model,
            experts,
            null_prefix,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Grounded and ungrounded passes, run concurrently.
    pub fn ground(&self, grounded: &GroundedImage<'_>, text: &[usize]) -> Result<GroundedStep> {
        let (g, u) = rayon::join(
            || self.model.forward_with_prefix(&grounded.prefix, text, None),
            || {
                self.model
                    .forward_with_prefix(&self.null_prefix, text, None)
            },
        );
        Ok(GroundedStep {
            trace_g: g?,
            trace_u: u?,
        })
    }

    /// Gate, localize, steer and calibrate on top of a grounded step.
    pub fn decide(
        &self,
        grounded: &GroundedImage<'_>,
        text: &[usize],
        step: &GroundedStep,
        config: &VliConfig,
        memo: &mut CounterfactualMemo,
    ) -> Result<VliStepReport> {
        config.validate()?;
        let conflict = conflict_report(&step.trace_g, &step.trace_u, 0, config.theta)?;
        let baseline_token = step.trace_g.logits.argmax();
        let mut report = VliStepReport {
            anchor: None,
            c_ac: None,
            t_c: 1.0,
            baseline_token,
            vli_token: baseline_token,
            delta_norms: Vec::new(),
            fallback: None,
            conflict,
        };
        if !report.conflict.triggered {
            return Ok(report);
        }
        match self.intervene(grounded, text, step, config, memo, report.conflict.score) {
            Ok(iv) => {
                report.anchor = Some(iv.anchor);
                report.c_ac = Some(iv.c_ac);
                report.t_c = iv.t_c;
                report.vli_token = iv.token;
                report.delta_norms = iv.delta_norms;
            }
            Err(e @ (VliError::DegenerateHeatmap(_) | VliError::DegenerateInpaint(_))) => {
                report.fallback = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        Ok(report)
    }

    fn intervene(
        &self,
        grounded: &GroundedImage<'_>,
        text: &[usize],
        step: &GroundedStep,
        config: &VliConfig,
        memo: &mut CounterfactualMemo,
        c_gu: f64,
    ) -> Result<Intervention> {
        let anchor = anchor_for_trace(&step.trace_g, &grounded.visual, self.experts, config)?;
        let (trace_a, trace_c) =
            memo.get_or_run(self.model, grounded.image, text, &anchor, config.inpaint)?;
        let deltas = correction_vectors(trace_a, trace_c)?;
        let delta_norms = deltas
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let c_ac = js_divergence(&trace_a.distribution(), &trace_c.distribution())?;
        let plan = SteeringPlan::new(deltas, config.alpha)?;
        let steered = self
            .model
            .forward_with_prefix(&grounded.prefix, text, Some(&plan))?;
        let t_c = calibration_temperature(CalibrationInputs {
            c_gu,
            c_ac,
            lambda: config.lambda,
            epsilon: config.epsilon,
        });
        let token = corrected_distribution(&steered.logits, t_c)?.argmax();
        Ok(Intervention {
            anchor,
            c_ac,
            t_c,
            token,
            delta_norms,
        })
    }

    /// One full step for `config`.
    pub fn step(
        &self,
        grounded: &GroundedImage<'_>,
        text: &[usize],
        config: &VliConfig,
    ) -> Result<(usize, VliStepReport)> {
        config.validate()?;
        let step = self.ground(grounded, text)?;
        let report = self.decide(
            grounded,
            text,
            &step,
            config,
            &mut CounterfactualMemo::default(),
        )?;
        Ok((report.vli_token, report))
    }

    /// Sequential decoding; detection re-runs from scratch at every step.
    pub fn generate(
        &self,
        image: &PatchGrid,
        prompt: &[usize],
        max_len: usize,
        config: &VliConfig,
    ) -> Result<(Vec<usize>, Vec<VliStepReport>)> {
        if max_len == 0 {
            return Err(VliError::param("max_len", "must be >= 1"));
        }
        config.validate()?;
        let grounded = GroundedImage::new(self.model, image)?;
        let mut text = prompt.to_vec();
        let mut tokens = Vec::with_capacity(max_len);
        let mut reports = Vec::with_capacity(max_len);
        for step in 0..max_len {
            let (token, mut report) = self.step(&grounded, &text, config)?;
            report.conflict.step = step;
            tokens.push(token);
            reports.push(report);
            text.push(token);
            if Some(token) == self.model.config.eos_token {
                break;
            }
        }
        Ok((tokens, reports))
    }
}

struct Intervention {
    anchor: AnchorMask,
    c_ac: f64,
    t_c: f64,
    token: usize,
    delta_norms: Vec<f64>,
}

/// One step of introspective decoding. Returns the chosen token and a report.
///
/// Degenerate heatmaps or inpaints fall back to the baseline token; the
/// reason is recorded in the report.
pub fn vli_decode_step(
    model: &Model,
    image: &PatchGrid,
    text: &[usize],
    experts: &ExpertHeadSet,
    config: &VliConfig,
) -> Result<(usize, VliStepReport)> {
    config.validate()?;
    let decoder = VliDecoder::new(model, experts)?;
    decoder.step(&GroundedImage::new(model, image)?, text, config)
}

/// Sequential VLI decoding; each step re-runs detection from scratch.
pub fn vli_generate(
    model: &Model,
    image: &PatchGrid,
    prompt: &[usize],
    max_len: usize,
    experts: &ExpertHeadSet,
    config: &VliConfig,
) -> Result<(Vec<usize>, Vec<VliStepReport>)> {
    VliDecoder::new(model, experts)?.generate(image, prompt, max_len, config)
}
