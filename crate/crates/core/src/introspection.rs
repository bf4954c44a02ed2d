//! Grounded vs. ungrounded decoding and the conflict gate.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VliError};
use crate::model::{Model, Provenance, StepTrace, VisualFeatures};
use crate::numerics::{argmax_log_ratio, js_divergence, TokenDistribution, DEFAULT_PROB_FLOOR};

/// Default conflict threshold, in nats.
pub const DEFAULT_THETA: f64 = 0.1;

/// Outcome of the conflict check at one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub step: usize,
    pub score: f64,
    pub triggered: bool,
    pub suspect_token: Option<usize>,
    pub p_grounded: TokenDistribution,
    pub p_ungrounded: TokenDistribution,
}

/// Run the grounded pass on `visual` and the ungrounded pass on null tokens,
/// concurrently, with the same text prefix.
pub fn dual_path_step(
    model: &Model,
    visual: &VisualFeatures,
    text: &[usize],
) -> Result<(StepTrace, StepTrace)> {
    if visual.provenance != Provenance::Real {
        return Err(VliError::InvalidInput(format!(
            "grounded path needs real features, got {:?}",
            visual.provenance
        )));
    }
    let null = model.null_visual();
    let (g, u) = rayon::join(
        || model.forward_step(visual, text, None),
        || model.forward_step(&null, text, None),
    );
    Ok((g?, u?))
}

/// Jensen-Shannon divergence between the two traces' output distributions.
pub fn conflict_score(trace_g: &StepTrace, trace_u: &StepTrace) -> Result<f64> {
    js_divergence(&trace_g.distribution(), &trace_u.distribution())
}

/// Strict comparison: a score equal to `theta` does not trigger.
pub fn detect_conflict(score: f64, theta: f64) -> bool {
    score > theta
}

/// Vocabulary item with the largest grounded/ungrounded log-probability gap.
pub fn suspect_token(p_g: &TokenDistribution, p_u: &TokenDistribution) -> Result<usize> {
    argmax_log_ratio(p_g, p_u, DEFAULT_PROB_FLOOR)
}

/// Full introspection for one step: both passes, score, gate, suspect token.
pub fn introspect(
    model: &Model,
    visual: &VisualFeatures,
    text: &[usize],
    step: usize,
    theta: f64,
) -> Result<(ConflictReport, StepTrace, StepTrace)> {
    let (g, u) = dual_path_step(model, visual, text)?;
    let report = conflict_report(&g, &u, step, theta)?;
    Ok((report, g, u))
}

pub fn conflict_report(
    trace_g: &StepTrace,
    trace_u: &StepTrace,
    step: usize,
    theta: f64,
) -> Result<ConflictReport> {
    let p_g = trace_g.distribution();
    let p_u = trace_u.distribution();
    let score = js_divergence(&p_g, &p_u)?;
    let triggered = detect_conflict(score, theta);
    let suspect = if triggered {
        Some(suspect_token(&p_g, &p_u)?)
    } else {
        None
    };
    Ok(ConflictReport {
        step,
        score,
        triggered,
        suspect_token: suspect,
        p_grounded: p_g,
        p_ungrounded: p_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PatchGrid};
    use crate::numerics::LogitVector;
    use std::f64::consts::LN_2;

    fn model() -> Model {
        Model::build(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 10,
            grid_rows: 2,
            grid_cols: 2,
            patch_dim: 3,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn image() -> PatchGrid {
        let mut g = PatchGrid::zeros(2, 2, 3);
        g.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 - 5.0) * 0.7);
        g
    }

    fn trace_with_logits(logits: Vec<f64>) -> StepTrace {
        StepTrace {
            hidden: vec![],
            attn: vec![],
            attn_text: vec![],
            logits: LogitVector::new(logits).unwrap(),
        }
    }

    #[test]
    fn vision_blind_model_has_no_conflict() {
        let blind = model().vision_blind();
        let vis = blind.encode_visual(&image()).unwrap();
        let (g, u) = dual_path_step(&blind, &vis, &[1, 2]).unwrap();
        assert_eq!(g.distribution(), u.distribution());
        assert_eq!(conflict_score(&g, &u).unwrap(), 0.0);
    }

    #[test]
    fn structured_image_conflicts() {
        let m = model();
        let vis = m.encode_visual(&image()).unwrap();
        let (r1, _, _) = introspect(&m, &vis, &[1, 2], 0, DEFAULT_THETA).unwrap();
        let (r2, _, _) = introspect(&m, &vis, &[1, 2], 0, DEFAULT_THETA).unwrap();
        assert!(r1.score > 0.0);
        assert_eq!(r1, r2);
        assert_eq!(r1.triggered, r1.suspect_token.is_some());
    }

    #[test]
    fn null_features_rejected_for_grounded_path() {
        let m = model();
        assert!(dual_path_step(&m, &m.null_visual(), &[1]).is_err());
    }

    #[test]
    fn score_examples() {
        let a = trace_with_logits(vec![0.1, 0.4, -1.0]);
        assert_eq!(conflict_score(&a, &a).unwrap(), 0.0);
        let g = trace_with_logits(vec![800.0, 0.0]);
        let u = trace_with_logits(vec![0.0, 800.0]);
        assert!((conflict_score(&g, &u).unwrap() - LN_2).abs() < 1e-6);
        let s1 = conflict_score(&a, &g.clone()).err();
        assert!(s1.is_some(), "vocab mismatch must error");
    }

    #[test]
    fn score_matches_numerics_oracle() {
        let g = trace_with_logits(vec![0.3, -1.2, 2.0, 0.0, 0.7]);
        let u = trace_with_logits(vec![1.1, 0.2, -0.5, 0.4, 0.0]);
        let direct = js_divergence(&g.distribution(), &u.distribution()).unwrap();
        assert_eq!(conflict_score(&g, &u).unwrap(), direct);
        assert_eq!(
            conflict_score(&g, &u).unwrap(),
            conflict_score(&u, &g).unwrap()
        );
    }

    #[test]
    fn gate_is_strict() {
        assert!(!detect_conflict(0.0, 0.1));
        assert!(detect_conflict(0.2, 0.1));
        assert!(!detect_conflict(0.1, 0.1));
    }

    #[test]
    fn suspect_examples() {
        let p = TokenDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(suspect_token(&p, &p).unwrap(), 0);
        let g = TokenDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let u = TokenDistribution::new(vec![0.2, 0.1, 0.7]).unwrap();
        assert_eq!(suspect_token(&g, &u).unwrap(), 1);
    }
}
