//! Seeded yes/no existence benchmark comparing greedy decoding with VLI.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{render_case, SceneCase, SceneParams};
use crate::attention::ExpertHeadSet;
use crate::error::{Result, VliError};
use crate::model::tokens::YES;
use crate::model::Model;
use crate::steering::{CounterfactualMemo, GroundedImage, VliConfig, VliDecoder, VliStepReport};

/// Per-decoder answer statistics. `f1` treats "yes" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerStats {
    pub hallucination_rate: f64,
    pub accuracy: f64,
    pub f1: f64,
}

impl AnswerStats {
    pub fn from_answers(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (mut n, mut wrong, mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize, 0usize);
        for (truth, answer) in pairs {
            n += 1;
            if truth != answer {
                wrong += 1;
            }
            match (truth == YES, answer == YES) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
        }
        let rate = if n == 0 { 0.0 } else { wrong as f64 / n as f64 };
        let denom = 2 * tp + fp + fneg;
        Self {
            hallucination_rate: rate,
            accuracy: 1.0 - rate,
            f1: if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            },
        }
    }
}

/// Decisions for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLog {
    pub index: usize,
    pub query_class: usize,
    pub present: bool,
    pub background_class: usize,
    pub distractor_class: Option<usize>,
    pub contrast: f64,
    pub n_sinks: usize,
    pub truth: usize,
    pub baseline: usize,
    pub vli: usize,
    pub conflict: f64,
    pub triggered: bool,
    pub t_c: f64,
    pub anchor: Option<Vec<usize>>,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_cases: usize,
    pub seed: u64,
    pub config: VliConfig,
    pub baseline: AnswerStats,
    pub vli: AnswerStats,
    pub triggered: usize,
    pub fallbacks: usize,
    pub cases: Vec<CaseLog>,
}

impl BenchReport {
    /// One CSV row per case, with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,query_class,present,background_class,contrast,n_sinks,truth,baseline,vli,triggered,conflict,t_c,anchor_size,fallback\n",
        );
        for c in &self.cases {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.index,
                c.query_class,
                c.present,
                c.background_class,
                crate::harness::format_f64(c.contrast),
                c.n_sinks,
                c.truth,
                c.baseline,
                c.vli,
                c.triggered,
                crate::harness::format_f64(c.conflict),
                crate::harness::format_f64(c.t_c),
                c.anchor.as_ref().map_or(0, Vec::len),
                c.fallback.is_some(),
            ));
        }
        out
    }
}

fn case_log(case: &SceneCase, baseline: usize, report: VliStepReport) -> CaseLog {
    CaseLog {
        index: case.index,
        query_class: case.query_class,
        present: case.present,
        background_class: case.background_class,
        distractor_class: case.distractor_class,
        contrast: case.contrast,
        n_sinks: case.sinks.len(),
        truth: case.truth(),
        baseline,
        vli: report.vli_token,
        conflict: report.conflict.score,
        triggered: report.conflict.triggered,
        t_c: report.t_c,
        anchor: report.anchor.map(|a| a.indices()),
        fallback: report.fallback,
    }
}

/// All configs on one case. The grounded and ungrounded passes run once and
/// counterfactual passes are shared between configs that pick the same mask.
fn run_case(
    decoder: &VliDecoder<'_>,
    configs: &[VliConfig],
    case: &SceneCase,
) -> Result<Vec<CaseLog>> {
    let prompt = case.prompt();
    let grounded = GroundedImage::new(decoder.model(), &case.image)?;
    let step = decoder.ground(&grounded, &prompt)?;
    // the first greedy token is the argmax of the grounded pass
    let baseline = step.trace_g.logits.argmax();
    let mut memo = CounterfactualMemo::default();
    configs
        .iter()
        .map(|config| {
            let report = decoder.decide(&grounded, &prompt, &step, config, &mut memo)?;
            Ok(case_log(case, baseline, report))
        })
        .collect()
}

fn report_from(config: &VliConfig, n_cases: usize, seed: u64, cases: Vec<CaseLog>) -> BenchReport {
    BenchReport {
        n_cases,
        seed,
        config: config.clone(),
        baseline: AnswerStats::from_answers(cases.iter().map(|c| (c.truth, c.baseline))),
        vli: AnswerStats::from_answers(cases.iter().map(|c| (c.truth, c.vli))),
        triggered: cases.iter().filter(|c| c.triggered).count(),
        fallbacks: cases.iter().filter(|c| c.fallback.is_some()).count(),
        cases,
    }
}

/// Run `n_cases` seeded scenes through greedy decoding and VLI. Cases are
/// evaluated in parallel and logged in index order.
pub fn run_pope_like_bench(
    model: &Model,
    experts: &ExpertHeadSet,
    config: &VliConfig,
    n_cases: usize,
    seed: u64,
) -> Result<BenchReport> {
    run_pope_like_bench_with(
        model,
        experts,
        config,
        &SceneParams::default(),
        n_cases,
        seed,
    )
}

pub fn run_pope_like_bench_with(
    model: &Model,
    experts: &ExpertHeadSet,
    config: &VliConfig,
    scenes: &SceneParams,
    n_cases: usize,
    seed: u64,
) -> Result<BenchReport> {
    let mut reports = run_pope_like_grid(
        model,
        experts,
        std::slice::from_ref(config),
        scenes,
        n_cases,
        seed,
    )?;
    Ok(reports.pop().expect("one config"))
}

/// One report per config, all over the same seeded suite.
pub fn run_pope_like_grid(
    model: &Model,
    experts: &ExpertHeadSet,
    configs: &[VliConfig],
    scenes: &SceneParams,
    n_cases: usize,
    seed: u64,
) -> Result<Vec<BenchReport>> {
    if n_cases == 0 {
        return Err(VliError::param("n_cases", "must be >= 1"));
    }
    if experts.is_empty() {
        return Err(VliError::InvalidInput(
            "benchmark needs calibrated expert heads".into(),
        ));
    }
    if configs.is_empty() {
        return Err(VliError::InvalidInput("no configurations to run".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let decoder = VliDecoder::new(model, experts)?;
    let per_case: Vec<Vec<CaseLog>> = (0..n_cases)
        .into_par_iter()
        .map(|i| {
            let case = render_case(scenes, &model.config, seed, i, None)?;
            run_case(&decoder, configs, &case)
        })
        .collect::<Result<_>>()?;
    let mut columns: Vec<Vec<CaseLog>> = configs
        .iter()
        .map(|_| Vec::with_capacity(n_cases))
        .collect();
    for logs in per_case {
        for (col, log) in columns.iter_mut().zip(logs) {
            col.push(log);
        }
    }
    Ok(configs
        .iter()
        .zip(columns)
        .map(|(c, cases)| report_from(c, n_cases, seed, cases))
        .collect())
}

/// Effect of the explicit sink filter on the same suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkComparison {
    /// Fraction of cases whose anchor mask differs with the filter on.
    pub mask_change_fraction: f64,
    pub without_filter: AnswerStats,
    pub with_filter: AnswerStats,
}

pub fn compare_sink_filter(without: &BenchReport, with: &BenchReport) -> Result<SinkComparison> {
    if without.n_cases != with.n_cases || without.seed != with.seed {
        return Err(VliError::InvalidInput(
            "reports cover different suites".into(),
        ));
    }
    let changed = without
        .cases
        .iter()
        .zip(&with.cases)
        .filter(|(a, b)| a.anchor != b.anchor)
        .count();
    Ok(SinkComparison {
        mask_change_fraction: changed as f64 / without.n_cases as f64,
        without_filter: without.vli,
        with_filter: with.vli,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_stats_examples() {
        use crate::model::tokens::NO;
        let s = AnswerStats::from_answers([(YES, YES), (YES, NO), (NO, NO), (NO, YES)]);
        assert_eq!(s.hallucination_rate, 0.5);
        assert_eq!(s.accuracy, 0.5);
        assert_eq!(s.f1, 0.5);
        let s = AnswerStats::from_answers([(NO, NO)]);
        assert_eq!((s.hallucination_rate, s.f1), (0.0, 0.0));
        // tp=2, fp=1, fn=0
        let s = AnswerStats::from_answers([(YES, YES), (YES, YES), (NO, YES)]);
        assert!((s.f1 - 0.8).abs() < 1e-15);
    }
}
