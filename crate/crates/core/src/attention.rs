//! Expert-head calibration, purified heatmaps, cumulative-energy anchors and
//! the optional activation-magnitude sink filter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VliError};
use crate::model::{Model, PatchGrid, StepTrace, VisualFeatures};

/// Default anchor energy ratio.
pub const DEFAULT_RHO: f64 = 0.4;
/// Default number of expert heads.
pub const DEFAULT_NUM_EXPERTS: usize = 8;
/// Default number of sink dimensions picked from validation activations.
pub const DEFAULT_SINK_DIMS: usize = 4;
/// Default sink-score threshold.
pub const DEFAULT_TAU_SINK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertHead {
    pub layer: usize,
    pub head: usize,
    pub mu: f64,
}

/// Heads ranked by localization score, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertHeadSet {
    pub entries: Vec<ExpertHead>,
}

impl ExpertHeadSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every head of the model, for ablations without calibration.
    pub fn all_heads(n_layers: usize, n_heads: usize) -> Self {
        let entries = (0..n_layers)
            .flat_map(|layer| {
                (0..n_heads).map(move |head| ExpertHead {
                    layer,
                    head,
                    mu: 0.0,
                })
            })
            .collect();
        Self { entries }
    }
}

/// Nonnegative weights over the visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Heatmap {
    pub weights: Vec<f64>,
}

impl Heatmap {
    /// Scale to unit mass; all-zero input is degenerate.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(VliError::InvalidInput(format!(
                "heatmap weight {i} is negative or non-finite"
            )));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(VliError::DegenerateHeatmap("heatmap has no mass".into()));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Binary selection over the visual tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorMask {
    pub bits: Vec<bool>,
    pub k: usize,
}

impl AnchorMask {
    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(VliError::InvalidInput(format!("mask index {i} >= {n}")));
            }
            bits[i] = true;
        }
        let k = bits.iter().filter(|b| **b).count();
        Ok(Self { bits, k })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            bits: vec![false; n],
            k: 0,
        }
    }

    pub fn full(n: usize) -> Self {
        Self {
            bits: vec![true; n],
            k: n,
        }
    }

    pub fn complement(&self) -> Self {
        let bits: Vec<bool> = self.bits.iter().map(|b| !b).collect();
        Self {
            k: bits.len() - self.k,
            bits,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// One calibration example: an image, its prompt, the token whose generation
/// step is scored, and the patches that actually show it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationRecord {
    pub image: PatchGrid,
    pub prompt: Vec<usize>,
    pub target_token: usize,
    pub gt_region: Vec<usize>,
}

impl ValidationRecord {
    pub fn validate(&self, n_visual: usize) -> Result<()> {
        if self.gt_region.is_empty() {
            return Err(VliError::InvalidInput("empty ground-truth region".into()));
        }
        if let Some(i) = self.gt_region.iter().find(|&&i| i >= n_visual) {
            return Err(VliError::InvalidInput(format!(
                "region index {i} out of range for {n_visual} visual tokens"
            )));
        }
        if self.prompt.is_empty() {
            return Err(VliError::InvalidInput("empty prompt".into()));
        }
        Ok(())
    }
}

/// Attention mass of one row that lands inside `region`.
pub fn localization_score(attn_row: &[f64], region: &[usize]) -> Result<f64> {
    if attn_row.iter().any(|a| !(*a >= 0.0)) {
        return Err(VliError::InvalidInput(
            "attention row has negative entries".into(),
        ));
    }
    let mut inside = vec![false; attn_row.len()];
    for &j in region {
        if j >= attn_row.len() {
            return Err(VliError::InvalidInput(format!(
                "region index {j} out of range for row of {}",
                attn_row.len()
            )));
        }
        inside[j] = true;
    }
    Ok(attn_row
        .iter()
        .zip(&inside)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a)
        .sum())
}

/// Score every head by its mean in-region attention at the target step and
/// keep the top `m`. Ties go to the lower `(layer, head)`.
pub fn calibrate_expert_heads(
    model: &Model,
    val_set: &[ValidationRecord],
    m: usize,
) -> Result<ExpertHeadSet> {
    let c = &model.config;
    let total_heads = c.n_layers * c.n_heads;
    if val_set.is_empty() {
        return Err(VliError::InvalidInput("empty validation set".into()));
    }
    if m == 0 || m > total_heads {
        return Err(VliError::param(
            "num_experts",
            format!("must be in 1..={total_heads}, got {m}"),
        ));
    }
    for r in val_set {
        r.validate(c.n_visual())?;
    }
    let per_record: Vec<Vec<f64>> = val_set
        .par_iter()
        .map(|r| {
            let vis = model.encode_visual(&r.image)?;
            let trace = model.forward_step(&vis, &r.prompt, None)?;
            let mut scores = Vec::with_capacity(total_heads);
            for layer in &trace.attn {
                for row in layer {
                    scores.push(localization_score(row, &r.gt_region)?);
                }
            }
            Ok(scores)
        })
        .collect::<Result<_>>()?;

    let mut entries: Vec<ExpertHead> = (0..total_heads)
        .map(|idx| {
            // sorted summation keeps the mean independent of record order
            let mut vals: Vec<f64> = per_record.iter().map(|s| s[idx]).collect();
            vals.sort_by(f64::total_cmp);
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            ExpertHead {
                layer: idx / c.n_heads,
                head: idx % c.n_heads,
                mu,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.mu.total_cmp(&a.mu)
            .then(a.layer.cmp(&b.layer))
            .then(a.head.cmp(&b.head))
    });
    entries.truncate(m);
    Ok(ExpertHeadSet { entries })
}

/// How each expert row enters the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadAggregation {
    /// Sum the raw visual slices, normalize once at the end.
    #[default]
    RawSlice,
    /// Renormalize each visual slice to unit mass before summing.
    RowNormalized,
}

/// Unnormalized sum of the expert heads' visual attention.
pub fn aggregate_expert_attention(
    trace: &StepTrace,
    experts: &ExpertHeadSet,
    mode: HeadAggregation,
) -> Result<Vec<f64>> {
    let nv = trace
        .attn
        .first()
        .and_then(|l| l.first())
        .map_or(0, Vec::len);
    let mut acc = vec![0.0; nv];
    for e in &experts.entries {
        let row = trace
            .attn
            .get(e.layer)
            .and_then(|l| l.get(e.head))
            .ok_or_else(|| {
                VliError::shape(format!("expert ({}, {}) not in trace", e.layer, e.head))
            })?;
        let scale = match mode {
            HeadAggregation::RawSlice => 1.0,
            HeadAggregation::RowNormalized => {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    1.0 / s
                } else {
                    0.0
                }
            }
        };
        for (a, r) in acc.iter_mut().zip(row) {
            *a += r * scale;
        }
    }
    Ok(acc)
}

/// Normalized expert-head heatmap.
pub fn purified_heatmap(trace: &StepTrace, experts: &ExpertHeadSet) -> Result<Heatmap> {
    purified_heatmap_with(trace, experts, HeadAggregation::RawSlice)
}

pub fn purified_heatmap_with(
    trace: &StepTrace,
    experts: &ExpertHeadSet,
    mode: HeadAggregation,
) -> Result<Heatmap> {
    Heatmap::normalized(aggregate_expert_attention(trace, experts, mode)?)
}

/// Smallest top-ranked set of tokens whose energy reaches `rho` of the total.
/// Ranking is by weight descending, index ascending on ties.
pub fn extract_anchor_mask(heat: &Heatmap, rho: f64) -> Result<AnchorMask> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(VliError::param(
            "rho",
            format!("must be in (0, 1], got {rho}"),
        ));
    }
    if heat.weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(VliError::InvalidInput(
            "heatmap has negative entries".into(),
        ));
    }
    let n = heat.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| heat.weights[b].total_cmp(&heat.weights[a]).then(a.cmp(&b)));
    let prefix: Vec<f64> = order
        .iter()
        .scan(0.0, |acc, &i| {
            *acc += heat.weights[i];
            Some(*acc)
        })
        .collect();
    let total = prefix.last().copied().unwrap_or(0.0);
    let target = rho * total;
    let k = prefix
        .iter()
        .position(|&p| p >= target)
        .map_or(n, |i| i + 1);
    let mut bits = vec![false; n];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Ok(AnchorMask { bits, k })
}

/// Largest share of the row's L2 norm carried by a single sink dimension.
pub fn sink_score(feature_row: &[f64], sink_dims: &[usize]) -> Result<f64> {
    if sink_dims.is_empty() {
        return Err(VliError::InvalidInput("no sink dimensions".into()));
    }
    if let Some(d) = sink_dims.iter().find(|&&d| d >= feature_row.len()) {
        return Err(VliError::InvalidInput(format!("sink dim {d} out of range")));
    }
    let norm = feature_row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(VliError::InvalidInput("zero-norm feature row".into()));
    }
    Ok(sink_dims
        .iter()
        .map(|&d| feature_row[d].abs() / norm)
        .fold(0.0, f64::max))
}

/// Zero heatmap entries whose feature row scores above `tau_sink`, renormalize.
pub fn mask_sinks(
    heat: &Heatmap,
    features: &VisualFeatures,
    sink_dims: &[usize],
    tau_sink: f64,
) -> Result<Heatmap> {
    if !(0.0..=1.0).contains(&tau_sink) {
        return Err(VliError::param(
            "tau_sink",
            format!("must be in [0, 1], got {tau_sink}"),
        ));
    }
    if features.rows.len() != heat.len() {
        return Err(VliError::shape(format!(
            "{} feature rows for a heatmap of {}",
            features.rows.len(),
            heat.len()
        )));
    }
    let mut kept = heat.weights.clone();
    let mut dropped = false;
    for (w, row) in kept.iter_mut().zip(&features.rows) {
        if sink_score(row, sink_dims)? > tau_sink {
            *w = 0.0;
            dropped = true;
        }
    }
    if !dropped {
        return Ok(heat.clone());
    }
    Heatmap::normalized(kept).map_err(|e| match e {
        VliError::DegenerateHeatmap(_) => {
            VliError::DegenerateHeatmap("every visual token was flagged as a sink".into())
        }
        other => other,
    })
}

/// Top-`q` feature dimensions by mean absolute activation, lowest index on ties.
pub fn select_sink_dims(features: &[VisualFeatures], q: usize) -> Result<Vec<usize>> {
    let width = features
        .iter()
        .flat_map(|f| f.rows.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| VliError::InvalidInput("no features to select sink dims from".into()))?;
    if q == 0 || q > width {
        return Err(VliError::param(
            "sink_dims",
            format!("must be in 1..={width}, got {q}"),
        ));
    }
    let mut mean_abs = vec![0.0; width];
    let mut count = 0usize;
    for row in features.iter().flat_map(|f| &f.rows) {
        for (m, v) in mean_abs.iter_mut().zip(row) {
            *m += v.abs();
        }
        count += 1;
    }
    mean_abs.iter_mut().for_each(|m| *m /= count as f64);
    let mut dims: Vec<usize> = (0..width).collect();
    dims.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    dims.truncate(q);
    dims.sort_unstable();
    Ok(dims)
}
