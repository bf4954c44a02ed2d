use vli_core::attention::{
    calibrate_expert_heads, extract_anchor_mask, purified_heatmap, AnchorMask,
};
use vli_core::harness::{read_report, write_report, Pipeline, RunConfig};
use vli_core::model::tokens::{NO, YES};
use vli_core::model::{load_checkpoint, save_checkpoint, PatchGrid, SteeringPlan};
use vli_core::steering::{vli_decode_step, VliConfig};
use vli_core::synthetic::{
    render_case, run_pope_like_bench, scene_model, validation_set, BenchReport, SceneParams,
};

fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (2.0 * x / (x + y)).ln())
            .sum()
    };
    0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Replace masked patches with the mean of the kept ones.
fn mean_fill(image: &PatchGrid, masked: &[bool]) -> PatchGrid {
    let mut out = image.clone();
    let kept: Vec<usize> = (0..image.n_patches()).filter(|&p| !masked[p]).collect();
    let dim = image.patch(0).len();
    let mean: Vec<f64> = (0..dim)
        .map(|d| kept.iter().map(|&p| image.patch(p)[d]).sum::<f64>() / kept.len() as f64)
        .collect();
    for p in (0..image.n_patches()).filter(|&p| masked[p]) {
        out.patch_mut(p).copy_from_slice(&mean);
    }
    out
}

/// Rebuild one corrected decision step by step from the model's forward pass
/// and compare with the library's decode step.
#[test]
fn replay_of_a_corrected_hallucination() {
    let model = scene_model(0).unwrap();
    let scenes = SceneParams::default();
    let val = validation_set(&scenes, &model.config, 7, 32).unwrap();
    let experts = calibrate_expert_heads(&model, &val, 8).unwrap();
    let config = VliConfig::default();

    // first case in the seeded suite where greedy decoding is wrong and VLI fixes it
    let (case, report) = (0..200)
        .map(|i| render_case(&scenes, &model.config, 42, i, None).unwrap())
        .find_map(|case| {
            let (token, report) =
                vli_decode_step(&model, &case.image, &case.prompt(), &experts, &config).unwrap();
            (report.baseline_token != case.truth() && token == case.truth())
                .then_some((case, report))
        })
        .expect("suite contains a corrected case");
    let prompt = case.prompt();

    let visual = model.encode_visual(&case.image).unwrap();
    let trace_g = model.forward_step(&visual, &prompt, None).unwrap();
    let trace_u = model
        .forward_step(&model.null_visual(), &prompt, None)
        .unwrap();
    let p_g = softmax(trace_g.logits.as_slice());
    let p_u = softmax(trace_u.logits.as_slice());
    let c_gu = jsd(&p_g, &p_u);
    assert!((c_gu - report.conflict.score).abs() < 1e-12);
    assert!(c_gu > config.theta);
    assert_eq!(argmax(&p_g), report.baseline_token);

    let heat = purified_heatmap(&trace_g, &experts).unwrap();
    let anchor = extract_anchor_mask(&heat, config.rho).unwrap();
    assert_eq!(Some(&anchor), report.anchor.as_ref());
    // the anchor covers the queried object
    assert!(case.present);
    assert!(
        case.object_region.iter().all(|&p| anchor.bits[p]),
        "{:?}",
        anchor.indices()
    );

    let anchor_only = mean_fill(&case.image, &anchor.complement().bits);
    let context_only = mean_fill(&case.image, &anchor.bits);
    let trace_a = model
        .forward_step(&model.encode_visual(&anchor_only).unwrap(), &prompt, None)
        .unwrap();
    let trace_c = model
        .forward_step(&model.encode_visual(&context_only).unwrap(), &prompt, None)
        .unwrap();
    let deltas: Vec<Vec<f64>> = trace_a
        .hidden
        .iter()
        .zip(&trace_c.hidden)
        .map(|(a, c)| a.iter().zip(c).map(|(x, y)| x - y).collect())
        .collect();
    for (d, n) in deltas.iter().zip(&report.delta_norms) {
        assert!((d.iter().map(|v| v * v).sum::<f64>().sqrt() - n).abs() < 1e-12);
    }
    let c_ac = jsd(
        &softmax(trace_a.logits.as_slice()),
        &softmax(trace_c.logits.as_slice()),
    );
    assert!((c_ac - report.c_ac.unwrap()).abs() < 1e-12);

    let plan = SteeringPlan::new(deltas, config.alpha).unwrap();
    let steered = model.forward_step(&visual, &prompt, Some(&plan)).unwrap();
    let t_c = 1.0
        + (c_gu / (c_ac + config.epsilon) - config.lambda)
            .max(0.0)
            .tanh();
    assert!((t_c - report.t_c).abs() < 1e-12);
    let scaled: Vec<f64> = steered.logits.as_slice().iter().map(|z| z / t_c).collect();
    assert_eq!(argmax(&scaled), report.vli_token);
    assert_eq!(report.vli_token, YES);
    assert_eq!(report.baseline_token, NO);
}

#[test]
fn bench_report_round_trips_through_json() {
    let pipeline = Pipeline::prepare(&RunConfig {
        n_validation: 8,
        ..RunConfig::default()
    })
    .unwrap();
    let experts = pipeline.calibrate().unwrap();
    let report =
        run_pope_like_bench(&pipeline.model, &experts, &pipeline.vli_config(), 12, 3).unwrap();
    assert_eq!(report.cases.len(), 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    write_report(&report, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back: BenchReport = read_report(&path).unwrap();
    assert_eq!(back.cases.len(), report.cases.len());
    assert_eq!(back.baseline, report.baseline);
    for (a, b) in back.cases.iter().zip(&report.cases) {
        assert_eq!(
            (a.index, a.truth, a.baseline, a.vli, &a.anchor),
            (b.index, b.truth, b.baseline, b.vli, &b.anchor)
        );
        assert!((a.conflict - b.conflict).abs() < 1e-11);
    }
    write_report(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(report.to_csv().lines().count(), 13);
}

#[test]
fn single_case_bench_and_empty_suite() {
    let model = scene_model(0).unwrap();
    let val = validation_set(&SceneParams::default(), &model.config, 7, 4).unwrap();
    let experts = calibrate_expert_heads(&model, &val, 4).unwrap();
    let r = run_pope_like_bench(&model, &experts, &VliConfig::default(), 1, 42).unwrap();
    assert_eq!(r.cases.len(), 1);
    assert!(run_pope_like_bench(&model, &experts, &VliConfig::default(), 0, 42).is_err());
}

#[test]
fn checkpoint_preserves_decisions() {
    let model = scene_model(0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.checksum(), model.checksum());
    let case = render_case(&SceneParams::default(), &model.config, 1, 0, None).unwrap();
    let a = model
        .forward_step(
            &model.encode_visual(&case.image).unwrap(),
            &case.prompt(),
            None,
        )
        .unwrap();
    let b = loaded
        .forward_step(
            &loaded.encode_visual(&case.image).unwrap(),
            &case.prompt(),
            None,
        )
        .unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn degenerate_anchor_is_handled() {
    // an all-zero mask leaves the image untouched and a full mask is refused by mean fill
    let model = scene_model(0).unwrap();
    let case = render_case(&SceneParams::default(), &model.config, 1, 0, None).unwrap();
    let n = case.image.n_patches();
    let empty = AnchorMask::empty(n);
    let same = vli_core::steering::inpaint(&case.image, &empty, Default::default()).unwrap();
    assert_eq!(same, case.image);
    assert!(
        vli_core::steering::inpaint(&case.image, &AnchorMask::full(n), Default::default()).is_err()
    );
}
