use serde::{Deserialize, Serialize};

use crate::attention::ExpertHeadSet;
use crate::error::{Result, VliError};
use crate::model::Model;
use crate::steering::VliConfig;
use crate::synthetic::{run_pope_like_grid, SceneParams};

use super::io::format_f64;

pub const DEFAULT_RHO_RANGE: &str = "0.2:0.8:0.1";
pub const DEFAULT_THETA_RANGE: &str = "0.05:0.3:0.05";
pub const DEFAULT_ALPHA_RANGE: &str = "0.1:0.9:0.2";

/// Parse `start:stop:step` (inclusive stop) or a single value.
///
/// Grid values are rounded to 12 significant digits so `0.1:0.9:0.2` yields
/// the decimal literals rather than accumulated binary error.
pub fn parse_range(field: &'static str, text: &str) -> Result<Vec<f64>> {
    let bad = |reason: String| VliError::config(field, reason);
    let nums: Vec<f64> = text
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("`{p}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite value in `{text}`")));
    }
    match nums[..] {
        [v] => Ok(vec![v]),
        [start, stop, step] => {
            if !(step > 0.0) {
                return Err(bad(format!("step must be > 0 in `{text}`")));
            }
            if stop < start {
                return Err(bad(format!("stop below start in `{text}`")));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..n)
                .map(|i| {
                    let v = start + i as f64 * step;
                    format_f64(v).parse().expect("formatted float parses")
                })
                .collect())
        }
        _ => Err(bad(format!(
            "expected `start:stop:step` or a value, got `{text}`"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub rho: f64,
    pub theta: f64,
    pub alpha: f64,
}

/// Ordered list of (ρ, θ, α) points.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub points: Vec<GridPoint>,
}

impl SweepGrid {
    /// Cartesian product of the supplied axes (ρ outermost); absent axes
    /// stay at `base`. With no axis supplied, the three default one-axis
    /// sweeps run back to back.
    pub fn new(
        base: &VliConfig,
        rho: Option<Vec<f64>>,
        theta: Option<Vec<f64>>,
        alpha: Option<Vec<f64>>,
    ) -> Result<Self> {
        if rho.is_none() && theta.is_none() && alpha.is_none() {
            return Self::default_axes(base);
        }
        let rhos = rho.unwrap_or_else(|| vec![base.rho]);
        let thetas = theta.unwrap_or_else(|| vec![base.theta]);
        let alphas = alpha.unwrap_or_else(|| vec![base.alpha]);
        let mut points = Vec::with_capacity(rhos.len() * thetas.len() * alphas.len());
        for &rho in &rhos {
            for &theta in &thetas {
                for &alpha in &alphas {
                    points.push(GridPoint { rho, theta, alpha });
                }
            }
        }
        Ok(Self { points })
    }

    pub fn default_axes(base: &VliConfig) -> Result<Self> {
        let mut points = Vec::new();
        for rho in parse_range("rho", DEFAULT_RHO_RANGE)? {
            points.push(GridPoint {
                rho,
                theta: base.theta,
                alpha: base.alpha,
            });
        }
        for theta in parse_range("theta", DEFAULT_THETA_RANGE)? {
            points.push(GridPoint {
                rho: base.rho,
                theta,
                alpha: base.alpha,
            });
        }
        for alpha in parse_range("alpha", DEFAULT_ALPHA_RANGE)? {
            points.push(GridPoint {
                rho: base.rho,
                theta: base.theta,
                alpha,
            });
        }
        Ok(Self { points })
    }

    pub fn configs(&self, base: &VliConfig) -> Result<Vec<VliConfig>> {
        self.points
            .iter()
            .map(|p| {
                let c = VliConfig {
                    rho: p.rho,
                    theta: p.theta,
                    alpha: p.alpha,
                    ..base.clone()
                };
                c.validate()?;
                Ok(c)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub theta: f64,
    pub alpha: f64,
    pub baseline_rate: f64,
    pub vli_rate: f64,
    pub vli_accuracy: f64,
    pub vli_f1: f64,
    pub triggered: usize,
}

/// Benchmark every grid point over the same seeded suite, in grid order.
pub fn run_sweep(
    model: &Model,
    experts: &ExpertHeadSet,
    base: &VliConfig,
    grid: &SweepGrid,
    n_cases: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let configs = grid.configs(base)?;
    let reports = run_pope_like_grid(
        model,
        experts,
        &configs,
        &SceneParams::default(),
        n_cases,
        seed,
    )?;
    Ok(grid
        .points
        .iter()
        .zip(reports)
        .map(|(p, r)| SweepRow {
            rho: p.rho,
            theta: p.theta,
            alpha: p.alpha,
            baseline_rate: r.baseline.hallucination_rate,
            vli_rate: r.vli.hallucination_rate,
            vli_accuracy: r.vli.accuracy,
            vli_f1: r.vli.f1,
            triggered: r.triggered,
        })
        .collect())
}

pub const SWEEP_CSV_HEADER: &str =
    "rho,theta,alpha,baseline_rate,vli_rate,vli_accuracy,vli_f1,triggered";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let cells = [
            r.rho,
            r.theta,
            r.alpha,
            r.baseline_rate,
            r.vli_rate,
            r.vli_accuracy,
            r.vli_f1,
        ]
        .map(format_f64);
        out.push_str(&cells.join(","));
        out.push_str(&format!(",{}\n", r.triggered));
    }
    out
}
