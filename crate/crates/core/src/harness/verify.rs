//! Self-check suite run by `vli verify`. Every check is seeded, so the
//! report is byte-identical across runs.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{extract_anchor_mask, ExpertHeadSet, Heatmap};
use crate::error::Result;
use crate::model::tokens::{BOS, QUERY};
use crate::model::{greedy_decode, Model, ModelConfig, PatchGrid};
use crate::numerics::{js_divergence, LogitVector, TokenDistribution};
use crate::steering::{
    calibration_temperature, corrected_distribution, vli_generate, CalibrationInputs, VliConfig,
};
use crate::synthetic::{
    check_orthogonality, make_scene, rectified_state, run_pope_like_bench, scene_model, snr_gain,
    validation_set, SceneParams,
};

use super::config::{parse_config, RunConfig};
use super::io::to_json_string;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    /// Largest observed violation measure (0 when exact).
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, trials: usize, worst: f64, failures: Vec<String>) -> CheckResult {
    let passed = failures.is_empty();
    let detail = match failures.len() {
        0 => "ok".to_string(),
        n => format!("{n} failures; first: {}", failures[0]),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        trials,
        worst,
        detail,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_magnitudes(r: &mut impl Rng) -> [f64; 3] {
    [
        r.random_range(0.1..3.0),
        r.random_range(0.1..3.0),
        r.random_range(0.1..3.0),
    ]
}

/// Counterfactual difference is orthogonal to the language component.
pub fn check_linguistic_orthogonality(n: usize) -> Result<CheckResult> {
    let mut r = rng(101);
    let (mut worst, mut failures) = (0.0f64, Vec::new());
    for i in 0..n {
        let d = r.random_range(3..=32);
        let scene = make_scene(i as u64, d, random_magnitudes(&mut r))?;
        let residual = check_orthogonality(&scene)?;
        worst = worst.max(residual);
        if !(residual <= 1e-9) {
            failures.push(format!("scene {i}: residual {residual:e}"));
        }
    }
    Ok(check("linguistic_orthogonality", n, worst, failures))
}

/// Measured SNR gain equals (1+α)/(1−α); rectified state composes as expected.
pub fn check_snr_amplification(per_alpha: usize) -> Result<CheckResult> {
    let mut r = rng(202);
    let (mut worst, mut failures, mut trials) = (0.0f64, Vec::new(), 0);
    for step in 0..10 {
        let alpha = step as f64 / 10.0;
        let expected = (1.0 + alpha) / (1.0 - alpha);
        for i in 0..per_alpha {
            let d = r.random_range(3..=32);
            let scene = make_scene((step * per_alpha + i) as u64, d, random_magnitudes(&mut r))?;
            let rel = (snr_gain(&scene, alpha)? - expected).abs() / expected;
            let h_d = rectified_state(&scene, alpha);
            let comp = (0..d)
                .map(|j| {
                    let want = (1.0 + alpha) * scene.z_obj[j]
                        + (1.0 - alpha) * scene.z_ctx[j]
                        + scene.z_lang[j];
                    (h_d[j] - want).abs()
                })
                .fold(0.0, f64::max);
            worst = worst.max(rel).max(comp);
            if !(rel <= 1e-9 && comp <= 1e-9) {
                failures.push(format!(
                    "alpha {alpha}, scene {i}: gain error {rel:e}, state error {comp:e}"
                ));
            }
            trials += 1;
        }
    }
    Ok(check("snr_amplification", trials, worst, failures))
}

fn random_distribution(r: &mut impl Rng, n: usize) -> TokenDistribution {
    let mut v: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    // sparsify some entries so supports can differ
    for x in v.iter_mut() {
        if r.random_bool(0.2) {
            *x = 0.0;
        }
    }
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    TokenDistribution::new(v.into_iter().map(|x| x / s).collect()).expect("normalized")
}

/// T_c stays in [1, 2), is exactly 1 on the clamped branch, and never flips
/// the argmax.
pub fn check_calibration(n_triples: usize, n_logits: usize) -> Result<CheckResult> {
    let mut r = rng(303);
    let (mut failures, mut clamped) = (Vec::new(), 0usize);
    for i in 0..n_triples {
        let c_gu = r.random_range(0.0..LN_2);
        let c_ac = if r.random_bool(0.1) {
            0.0
        } else {
            r.random_range(0.0..LN_2)
        };
        let lambda = r.random_range(0.0..3.0);
        let epsilon = 1e-6;
        let t = calibration_temperature(CalibrationInputs {
            c_gu,
            c_ac,
            lambda,
            epsilon,
        });
        if !(1.0..2.0).contains(&t) {
            failures.push(format!("triple {i}: T_c = {t}"));
        }
        if c_gu / (c_ac + epsilon) <= lambda {
            clamped += 1;
            if t != 1.0 {
                failures.push(format!("triple {i}: clamped branch gave {t}"));
            }
        }
    }
    for i in 0..n_logits {
        let n = r.random_range(2..=64);
        let logits = LogitVector::new((0..n).map(|_| r.random_range(-20.0..20.0)).collect())?;
        let t = 1.0 + r.random::<f64>();
        let got = corrected_distribution(&logits, t)?.argmax();
        if got != logits.argmax() {
            failures.push(format!("logits {i}: argmax moved at T_c = {t}"));
        }
    }
    let mut c = check("calibration_contract", n_triples + n_logits, 0.0, failures);
    if c.passed {
        c.detail = format!("ok ({clamped} clamped triples)");
    }
    Ok(c)
}

/// Symmetry, bounds, zero-iff-equal and the disjoint-support maximum.
pub fn check_divergence(n: usize) -> Result<CheckResult> {
    let mut r = rng(404);
    let (mut worst, mut failures) = (0.0f64, Vec::new());
    for i in 0..n {
        let k = r.random_range(2..=32);
        let p = random_distribution(&mut r, k);
        let q = random_distribution(&mut r, k);
        let pq = js_divergence(&p, &q)?;
        let qp = js_divergence(&q, &p)?;
        let pp = js_divergence(&p, &p)?;
        worst = worst.max((pq - qp).abs()).max(pp);
        if (pq - qp).abs() > 1e-12 || !(0.0..=LN_2).contains(&pq) || pp > 1e-12 {
            failures.push(format!("pair {i}: {pq} vs {qp}, self {pp}"));
        }
        if p != q && pq == 0.0 {
            failures.push(format!(
                "pair {i}: distinct distributions at zero divergence"
            ));
        }
    }
    for k in 2..=16 {
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        a[..k / 2]
            .iter_mut()
            .for_each(|x| *x = 1.0 / (k / 2) as f64);
        b[k / 2..]
            .iter_mut()
            .for_each(|x| *x = 1.0 / (k - k / 2) as f64);
        let d = js_divergence(&TokenDistribution::new(a)?, &TokenDistribution::new(b)?)?;
        worst = worst.max((d - LN_2).abs());
        if (d - LN_2).abs() > 1e-12 {
            failures.push(format!("disjoint support of size {k}: {d}"));
        }
    }
    Ok(check("divergence_kernel", n + 15, worst, failures))
}

/// Sufficiency, minimality and ρ-nesting of the anchor mask.
pub fn check_anchor_extraction(n: usize) -> Result<CheckResult> {
    let mut r = rng(505);
    let (mut worst, mut failures) = (0.0f64, Vec::new());
    for i in 0..n {
        let size = r.random_range(4..=256);
        let raw: Vec<f64> = (0..size).map(|_| r.random::<f64>().powi(3)).collect();
        let heat = Heatmap::normalized(raw)?;
        let mut rhos = [r.random_range(0.01..=1.0), r.random_range(0.01..=1.0)];
        rhos.sort_by(f64::total_cmp);
        let small = extract_anchor_mask(&heat, rhos[0])?;
        let large = extract_anchor_mask(&heat, rhos[1])?;
        for (rho, mask) in [(rhos[0], &small), (rhos[1], &large)] {
            let selected: Vec<f64> = mask.indices().iter().map(|&j| heat.weights[j]).collect();
            let energy: f64 = selected.iter().sum();
            let shortfall = rho - energy;
            worst = worst.max(shortfall);
            if shortfall > 1e-12 {
                failures.push(format!("heatmap {i}: energy {energy} below rho {rho}"));
            }
            let smallest = selected.iter().copied().fold(f64::INFINITY, f64::min);
            let tied = heat.weights.iter().filter(|&&w| w == smallest).count() > 1;
            if !tied && energy - smallest >= rho {
                failures.push(format!(
                    "heatmap {i}: mask of {} is not minimal at rho {rho}",
                    mask.len()
                ));
            }
        }
        if small.bits.iter().zip(&large.bits).any(|(&s, &l)| s && !l) {
            failures.push(format!("heatmap {i}: masks not nested for {rhos:?}"));
        }
    }
    Ok(check("anchor_extraction", n, worst, failures))
}

fn random_image(r: &mut impl Rng, config: &ModelConfig) -> PatchGrid {
    let mut img = PatchGrid::zeros(config.grid_rows, config.grid_cols, config.patch_dim);
    for p in 0..img.n_patches() {
        img.patch_mut(p)
            .iter_mut()
            .for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    img
}

/// With θ ≥ ln 2 the gate never fires and VLI reproduces greedy decoding;
/// with α = 0 and the calibration clamp forced, every step keeps the
/// baseline token.
pub fn check_gate_soundness(n: usize) -> Result<CheckResult> {
    let mut r = rng(606);
    let mut failures = Vec::new();
    let closed = VliConfig {
        theta: LN_2,
        ..VliConfig::default()
    };
    let inert = VliConfig {
        theta: 0.0,
        alpha: 0.0,
        lambda: 1e300,
        ..VliConfig::default()
    };
    for i in 0..n {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size: 24,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 6,
            seed: i as u64,
            ..ModelConfig::default()
        };
        let model = Model::build(config.clone())?;
        let experts = ExpertHeadSet::all_heads(config.n_layers, config.n_heads);
        let image = random_image(&mut r, &config);
        let prompt: Vec<usize> = std::iter::once(BOS)
            .chain((0..r.random_range(1..4)).map(|_| r.random_range(0..config.vocab_size)))
            .collect();
        let max_len = 4;
        let greedy = greedy_decode(&model, &model.encode_visual(&image)?, &prompt, max_len)?;
        let (tokens, reports) = vli_generate(&model, &image, &prompt, max_len, &experts, &closed)?;
        if tokens != greedy || reports.iter().any(|s| s.conflict.triggered) {
            failures.push(format!(
                "triple {i}: closed gate diverged ({tokens:?} vs {greedy:?})"
            ));
        }
        let (tokens, reports) = vli_generate(&model, &image, &prompt, max_len, &experts, &inert)?;
        if reports
            .iter()
            .any(|s| s.vli_token != s.baseline_token || s.t_c != 1.0)
        {
            failures.push(format!("triple {i}: inert steering changed a token"));
        }
        if tokens != greedy {
            failures.push(format!(
                "triple {i}: inert run diverged ({tokens:?} vs {greedy:?})"
            ));
        }
    }
    Ok(check("gate_soundness", n, 0.0, failures))
}

/// Same seed and config give identical benchmark reports and identical
/// serialized bytes; configs survive a serialize/parse round trip.
pub fn check_determinism(n_cases: usize) -> Result<CheckResult> {
    let mut failures = Vec::new();
    let model = scene_model(0)?;
    let val = validation_set(&SceneParams::default(), &model.config, 7, 8)?;
    let experts = crate::attention::calibrate_expert_heads(&model, &val, 8)?;
    let config = VliConfig::default();
    let a = run_pope_like_bench(&model, &experts, &config, n_cases, 42)?;
    let b = run_pope_like_bench(&model, &experts, &config, n_cases, 42)?;
    if a != b || to_json_string(&a)? != to_json_string(&b)? {
        failures.push("benchmark reports differ between identical runs".into());
    }
    let rc = RunConfig {
        rho: 0.35,
        alpha: 0.7,
        sink_filter: true,
        ..RunConfig::default()
    };
    if parse_config(&serde_json::to_string(&rc)?)? != rc {
        failures.push("config round trip changed the config".into());
    }
    let query = vec![BOS, QUERY];
    let image = PatchGrid::zeros(
        model.config.grid_rows,
        model.config.grid_cols,
        model.config.patch_dim,
    );
    let t1 = model.forward_step(&model.encode_visual(&image)?, &query, None)?;
    let t2 = model.forward_step(&model.encode_visual(&image)?, &query, None)?;
    if t1.logits != t2.logits {
        failures.push("forward pass is not deterministic".into());
    }
    Ok(check("determinism", 3, 0.0, failures))
}

/// Run every check at full size.
pub fn run_verify() -> Result<VerifyReport> {
    let checks = vec![
        check_linguistic_orthogonality(10_000)?,
        check_snr_amplification(1_000)?,
        check_calibration(100_000, 10_000)?,
        check_divergence(10_000)?,
        check_anchor_extraction(10_000)?,
        check_gate_soundness(100)?,
        check_determinism(20)?,
    ];
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
