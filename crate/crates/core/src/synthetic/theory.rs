//! Closed-form latent model: a hidden state is the sum of orthogonal object,
//! context and language components, and the counterfactual states drop one
//! component each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VliError};
use crate::model::tokens::{NO, YES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub z_obj: Vec<f64>,
    pub z_ctx: Vec<f64>,
    pub z_lang: Vec<f64>,
    pub truth_label: usize,
    /// Answer the language prior alone would give.
    pub prior_label: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl SyntheticScene {
    /// Assemble a scene from explicit components without checking
    /// orthogonality, for degenerate and adversarial cases.
    pub fn from_components(z_obj: Vec<f64>, z_ctx: Vec<f64>, z_lang: Vec<f64>) -> Result<Self> {
        if z_obj.len() != z_ctx.len() || z_obj.len() != z_lang.len() {
            return Err(VliError::shape("scene components differ in dimension"));
        }
        Ok(Self {
            z_obj,
            z_ctx,
            z_lang,
            truth_label: YES,
            prior_label: NO,
        })
    }

    pub fn dim(&self) -> usize {
        self.z_obj.len()
    }

    /// `(||z_obj||, ||z_ctx||, ||z_lang||)`
    pub fn magnitudes(&self) -> (f64, f64, f64) {
        (norm(&self.z_obj), norm(&self.z_ctx), norm(&self.z_lang))
    }

    /// Largest absolute pairwise inner product between components.
    pub fn max_cross_product(&self) -> f64 {
        dot(&self.z_obj, &self.z_ctx)
            .abs()
            .max(dot(&self.z_obj, &self.z_lang).abs())
            .max(dot(&self.z_ctx, &self.z_lang).abs())
    }
}

/// Seeded scene with Gram-Schmidt-orthogonalized directions scaled to
/// `magnitudes = (obj, ctx, lang)`.
pub fn make_scene(seed: u64, d: usize, magnitudes: [f64; 3]) -> Result<SyntheticScene> {
    if d < 3 {
        return Err(VliError::param(
            "d",
            format!("need at least 3 dimensions, got {d}"),
        ));
    }
    if magnitudes.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(VliError::param("magnitudes", "must be finite and > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
    while basis.len() < 3 {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes of modified Gram-Schmidt keep the residual at rounding level
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let truth_yes = rand::Rng::random_bool(&mut rng, 0.5);
    let scale = |b: &[f64], m: f64| b.iter().map(|x| x * m).collect::<Vec<_>>();
    let (truth_label, prior_label) = if truth_yes { (YES, NO) } else { (NO, YES) };
    Ok(SyntheticScene {
        z_obj: scale(&basis[0], magnitudes[0]),
        z_ctx: scale(&basis[1], magnitudes[1]),
        z_lang: scale(&basis[2], magnitudes[2]),
        truth_label,
        prior_label,
    })
}

/// Grounded, context-only and anchor-only states under an ideal inpainter.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealStates {
    pub h_g: Vec<f64>,
    pub h_c: Vec<f64>,
    pub h_a: Vec<f64>,
}

pub fn ideal_states(scene: &SyntheticScene) -> IdealStates {
    IdealStates {
        h_g: add(&add(&scene.z_obj, &scene.z_ctx), &scene.z_lang),
        h_c: add(&scene.z_ctx, &scene.z_lang),
        h_a: add(&scene.z_obj, &scene.z_lang),
    }
}

/// `|<h_a - h_c, z_lang>| / (||h_a - h_c|| ||z_lang||)`
pub fn check_orthogonality(scene: &SyntheticScene) -> Result<f64> {
    let s = ideal_states(scene);
    let delta = sub(&s.h_a, &s.h_c);
    let nd = norm(&delta);
    let nl = norm(&scene.z_lang);
    if nd == 0.0 {
        return Err(VliError::UndefinedRatio("correction vector is zero".into()));
    }
    if nl == 0.0 {
        return Err(VliError::UndefinedRatio(
            "language component is zero".into(),
        ));
    }
    Ok(dot(&delta, &scene.z_lang).abs() / (nd * nl))
}

/// `h_g + alpha (h_a - h_c)`
pub fn rectified_state(scene: &SyntheticScene, alpha: f64) -> Vec<f64> {
    let s = ideal_states(scene);
    let delta = sub(&s.h_a, &s.h_c);
    s.h_g
        .iter()
        .zip(&delta)
        .map(|(g, d)| g + alpha * d)
        .collect()
}

fn snr(h: &[f64], obj_dir: &[f64], ctx_dir: &[f64]) -> f64 {
    dot(h, obj_dir).abs() / dot(h, ctx_dir).abs()
}

/// Ratio of object-to-context signal after and before steering, measured by
/// projecting onto the component directions.
pub fn snr_gain(scene: &SyntheticScene, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(VliError::param(
            "alpha",
            format!("must be in [0, 1), got {alpha}"),
        ));
    }
    let (no, nc, _) = scene.magnitudes();
    if nc == 0.0 {
        return Err(VliError::UndefinedRatio("context component is zero".into()));
    }
    if no == 0.0 {
        return Err(VliError::UndefinedRatio("object component is zero".into()));
    }
    let obj_dir: Vec<f64> = scene.z_obj.iter().map(|x| x / no).collect();
    let ctx_dir: Vec<f64> = scene.z_ctx.iter().map(|x| x / nc).collect();
    let h_g = ideal_states(scene).h_g;
    let h_d = rectified_state(scene, alpha);
    Ok(snr(&h_d, &obj_dir, &ctx_dir) / snr(&h_g, &obj_dir, &ctx_dir))
}

/// Ungrounded certainty ratio `c_gu / (c_ac + eps)`.
pub fn risk_ratio(c_gu: f64, c_ac: f64, epsilon: f64) -> f64 {
    c_gu / (c_ac + epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::{calibration_temperature, CalibrationInputs};

    #[test]
    fn scenes_are_orthogonal_and_scaled() {
        for seed in 0..50 {
            let s = make_scene(seed, 16, [1.0, 1.0, 1.0]).unwrap();
            assert!(s.max_cross_product() <= 1e-12);
            let (a, b, c) = s.magnitudes();
            for m in [a, b, c] {
                assert!((m - 1.0).abs() < 1e-12);
            }
            assert_ne!(s.truth_label, s.prior_label);
        }
        assert_eq!(
            make_scene(3, 8, [2.0, 0.5, 1.0]).unwrap(),
            make_scene(3, 8, [2.0, 0.5, 1.0]).unwrap()
        );
        assert!(make_scene(3, 2, [1.0; 3]).is_err());
        assert!(make_scene(3, 5, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn ideal_state_examples() {
        let s =
            SyntheticScene::from_components(vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0, 0.0, 2.0])
                .unwrap();
        let st = ideal_states(&s);
        assert_eq!(st.h_g, st.h_a);
        let s =
            SyntheticScene::from_components(vec![0.0; 3], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0])
                .unwrap();
        let st = ideal_states(&s);
        assert_eq!(st.h_g, st.h_c);

        let s = make_scene(11, 6, [1.5, 0.7, 2.2]).unwrap();
        let st = ideal_states(&s);
        for i in 0..6 {
            assert_eq!(st.h_g[i], s.z_obj[i] + s.z_ctx[i] + s.z_lang[i]);
            assert_eq!(st.h_c[i], s.z_ctx[i] + s.z_lang[i]);
            assert_eq!(st.h_a[i], s.z_obj[i] + s.z_lang[i]);
        }
    }

    #[test]
    fn orthogonality_residual() {
        let s = make_scene(5, 12, [1.0, 2.0, 3.0]).unwrap();
        assert!(check_orthogonality(&s).unwrap() <= 1e-9);

        // leak half of z_lang into z_ctx
        let mut leaky = s.clone();
        for (c, l) in leaky.z_ctx.iter_mut().zip(&s.z_lang) {
            *c += 0.5 * l;
        }
        let delta: Vec<f64> = leaky
            .z_obj
            .iter()
            .zip(&leaky.z_ctx)
            .map(|(o, c)| o - c)
            .collect();
        let oracle = dot(&delta, &leaky.z_lang).abs() / (norm(&delta) * norm(&leaky.z_lang));
        let r = check_orthogonality(&leaky).unwrap();
        assert!(r > 0.1);
        assert!((r - oracle).abs() < 1e-12);

        let same = SyntheticScene::from_components(
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            check_orthogonality(&same),
            Err(VliError::UndefinedRatio(_))
        ));
    }

    #[test]
    fn snr_gain_examples() {
        let s = make_scene(8, 10, [1.0, 1.3, 0.6]).unwrap();
        assert_eq!(snr_gain(&s, 0.0).unwrap(), 1.0);
        assert!((snr_gain(&s, 0.5).unwrap() - 3.0).abs() < 1e-9);
        assert!((snr_gain(&s, 0.9).unwrap() - 19.0).abs() < 1e-9);
        assert!(snr_gain(&s, 1.0).is_err());
        assert!(snr_gain(&s, -0.1).is_err());
        let no_ctx =
            SyntheticScene::from_components(vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0, 0.0, 1.0])
                .unwrap();
        assert!(matches!(
            snr_gain(&no_ctx, 0.5),
            Err(VliError::UndefinedRatio(_))
        ));
    }

    #[test]
    fn rectified_state_composition() {
        let s = make_scene(21, 9, [0.8, 1.1, 1.7]).unwrap();
        for i in 0..10 {
            let alpha = i as f64 / 10.0;
            let h = rectified_state(&s, alpha);
            for j in 0..9 {
                let oracle = (1.0 + alpha) * s.z_obj[j] + (1.0 - alpha) * s.z_ctx[j] + s.z_lang[j];
                assert!((h[j] - oracle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn risk_ratio_cases() {
        let t = |r: f64| {
            calibration_temperature(CalibrationInputs {
                c_gu: r,
                c_ac: 1.0,
                lambda: 1.0,
                epsilon: 0.0,
            })
        };
        // valid recognition
        let r = risk_ratio(0.01, 0.6, 1e-6);
        assert!(r < 0.02);
        assert_eq!(t(r), 1.0);
        // blind confidence
        let r = risk_ratio(0.5, 0.0, 1e-6);
        assert!((r - 0.5e6).abs() < 1e-6);
        assert!(t(r) > 1.999);
        assert_eq!(risk_ratio(0.3, 0.2, 0.1), 0.3 / (0.2 + 0.1));
    }
}
