//! Probability and information-theoretic kernels.
//!
//! Everything here works in `f64` and natural logarithms, so divergences are
//! reported in nats and the Jensen-Shannon ceiling is `ln 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VliError};

/// Default floor substituted for zero probabilities before taking logs.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

/// Normalization tolerance for [`TokenDistribution`].
fn norm_tolerance(n: usize) -> f64 {
    1e-12_f64.max(n as f64 * 4.0 * f64::EPSILON)
}

/// Compensated (Neumaier) summation.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pre-softmax scores over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(VliError::InvalidInput(format!(
                "logit vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VliError::InvalidInput(format!(
                "non-finite logit at index {i}"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = VliError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// A normalized probability vector over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution(Vec<f64>);

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(VliError::InvalidInput("empty distribution".into()));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(VliError::InvalidInput(format!(
                "probability at index {i} outside [0, 1]: {}",
                probs[i]
            )));
        }
        let total = stable_sum(probs.iter().copied());
        if (total - 1.0).abs() > norm_tolerance(probs.len()) {
            return Err(VliError::InvalidInput(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.0[token]
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = VliError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(v: TokenDistribution) -> Self {
        v.0
    }
}

fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total = stable_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

/// Max-shifted softmax.
pub fn softmax(logits: &LogitVector) -> TokenDistribution {
    TokenDistribution(softmax_slice(logits.as_slice()))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &TokenDistribution) -> f64 {
    let h = -stable_sum(
        p.as_slice()
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln()),
    );
    h.max(0.0)
}

fn check_same_vocab(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(VliError::shape(format!(
            "vocabulary sizes differ: {a} vs {b}"
        )));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats, clamped to `[0, ln 2]`.
///
/// Evaluated as the mean of the two KL terms against the midpoint, which is
/// algebraically `H(m) - (H(p) + H(q)) / 2` but free of the cancellation that
/// formula suffers for nearly equal inputs.
pub fn js_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    check_same_vocab(p.len(), q.len())?;
    let kl_to_mid = |a: &[f64], b: &[f64]| {
        stable_sum(a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(&x, &y)| {
            let m = 0.5 * (x + y);
            x * (x / m).ln()
        }))
    };
    let (ps, qs) = (p.as_slice(), q.as_slice());
    let js = 0.5 * kl_to_mid(ps, qs) + 0.5 * kl_to_mid(qs, ps);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// `softmax(logits / temperature)`.
pub fn temperature_scale(logits: &LogitVector, temperature: f64) -> Result<TokenDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(VliError::param(
            "temperature",
            format!("must be finite and > 0, got {temperature}"),
        ));
    }
    let scaled: Vec<f64> = logits.as_slice().iter().map(|v| v / temperature).collect();
    Ok(TokenDistribution(softmax_slice(&scaled)))
}

/// `argmax_w [ln max(p_g(w), floor) - ln max(p_u(w), floor)]`, lowest index on ties.
pub fn argmax_log_ratio(
    p_g: &TokenDistribution,
    p_u: &TokenDistribution,
    floor: f64,
) -> Result<usize> {
    check_same_vocab(p_g.len(), p_u.len())?;
    if !(floor > 0.0) {
        return Err(VliError::param(
            "floor",
            format!("must be > 0, got {floor}"),
        ));
    }
    let ratios: Vec<f64> = p_g
        .as_slice()
        .iter()
        .zip(p_u.as_slice())
        .map(|(&g, &u)| g.max(floor).ln() - u.max(floor).ln())
        .collect();
    Ok(argmax(&ratios))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn dist(v: &[f64]) -> TokenDistribution {
        TokenDistribution::new(v.to_vec()).unwrap()
    }

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    // Golden values below were produced with 40-digit mpmath evaluation of the
    // textbook formulas.

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&logits(&[0.0, 0.0])).as_slice(), &[0.5, 0.5]);
        for c in [-300.0, -1.0, 0.0, 7.5, 1e3] {
            let p = softmax(&logits(&[c, c, c, c]));
            assert_eq!(p.as_slice(), &[0.25; 4]);
        }
        let golden = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_47,
            0.665_240_955_774_821_889_53,
        ];
        let p = softmax(&logits(&[1.0, 2.0, 3.0]));
        for (a, b) in p.as_slice().iter().zip(golden) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(LogitVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![0.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&dist(&[1.0, 0.0, 0.0])), 0.0);
        for n in [2usize, 3, 7, 64] {
            let h = shannon_entropy(&dist(&vec![1.0 / n as f64; n]));
            assert!((h - (n as f64).ln()).abs() < 1e-12);
        }
        let h = shannon_entropy(&dist(&[0.9, 0.1]));
        assert!((h - 0.325_082_973_391_448_239_51).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_input_rejected() {
        assert!(TokenDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(TokenDistribution::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn js_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!(
            (js_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap() - LN_2).abs() < 1e-12
        );
        let js = js_divergence(&dist(&[0.9, 0.1]), &dist(&[0.5, 0.5])).unwrap();
        assert!((js - 0.101_749_225_079_196_688_56).abs() < 1e-15, "{js}");
    }

    #[test]
    fn js_shape_error() {
        let err = js_divergence(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5]));
        assert!(matches!(err, Err(VliError::Shape(_))));
    }

    #[test]
    fn temperature_examples() {
        let l = logits(&[1.0, 2.0, 3.0]);
        assert_eq!(temperature_scale(&l, 1.0).unwrap(), softmax(&l));
        let h1 = shannon_entropy(&temperature_scale(&l, 1.0).unwrap());
        let h10 = shannon_entropy(&temperature_scale(&l, 10.0).unwrap());
        assert!(h10 > h1);
        let p = temperature_scale(&logits(&[2.0, 1.0]), 2.0).unwrap();
        assert!((p.prob(0) - 0.622_459_331_201_854_564_64).abs() < 1e-15);
        assert!((p.prob(1) - 0.377_540_668_798_145_435_36).abs() < 1e-15);
        assert!(temperature_scale(&l, 0.0).is_err());
        assert!(temperature_scale(&l, -1.0).is_err());
    }

    #[test]
    fn log_ratio_examples() {
        let p = dist(&[0.25, 0.25, 0.5]);
        assert_eq!(argmax_log_ratio(&p, &p, DEFAULT_PROB_FLOOR).unwrap(), 0);
        let g = dist(&[0.8, 0.2]);
        let u = dist(&[0.2, 0.8]);
        assert_eq!(argmax_log_ratio(&g, &u, DEFAULT_PROB_FLOOR).unwrap(), 0);
        // zero probability hits the floor instead of -inf
        let g = dist(&[0.0, 1.0]);
        let u = dist(&[0.5, 0.5]);
        assert_eq!(argmax_log_ratio(&g, &u, DEFAULT_PROB_FLOOR).unwrap(), 1);
        assert!(argmax_log_ratio(&g, &dist(&[1.0]), 1e-12).is_err());
    }

    fn exhaustive_log_ratio(g: &[f64], u: &[f64], floor: f64) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for w in 0..g.len() {
            let r = g[w].max(floor).ln() - u[w].max(floor).ln();
            if r > best.0 {
                best = (r, w);
            }
        }
        best.1
    }

    fn prob_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    fn normalized(v: Vec<f64>) -> TokenDistribution {
        // renormalize through softmax-free path; tiny drift is absorbed here
        let s = stable_sum(v.iter().copied());
        TokenDistribution::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn log_ratio_matches_scan(g in prob_vec(5), u in prob_vec(5)) {
            let (pg, pu) = (normalized(g), normalized(u));
            prop_assert_eq!(
                argmax_log_ratio(&pg, &pu, 1e-12).unwrap(),
                exhaustive_log_ratio(pg.as_slice(), pu.as_slice(), 1e-12)
            );
        }

        #[test]
        fn js_symmetric_and_bounded(p in prob_vec(6), q in prob_vec(6)) {
            let (p, q) = (normalized(p), normalized(q));
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=LN_2 + 1e-12).contains(&a));
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 2..20), c in -100.0f64..100.0) {
            let a = softmax(&LogitVector::new(v.clone()).unwrap());
            let b = softmax(&LogitVector::new(v.iter().map(|x| x + c).collect()).unwrap());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_bounded(p in prob_vec(8)) {
            let p = normalized(p);
            let h = shannon_entropy(&p);
            prop_assert!(h >= 0.0 && h <= (8f64).ln() + 1e-12);
        }

        #[test]
        fn temperature_preserves_argmax(v in proptest::collection::vec(-20.0f64..20.0, 2..32), t in 0.05f64..50.0) {
            let l = LogitVector::new(v).unwrap();
            prop_assert_eq!(temperature_scale(&l, t).unwrap().argmax(), l.argmax());
        }

        #[test]
        fn entropy_nondecreasing_in_temperature(v in proptest::collection::vec(-10.0f64..10.0, 2..16), t in 0.1f64..5.0, dt in 0.0f64..5.0) {
            let l = LogitVector::new(v).unwrap();
            let lo = shannon_entropy(&temperature_scale(&l, t).unwrap());
            let hi = shannon_entropy(&temperature_scale(&l, t + dt).unwrap());
            prop_assert!(hi >= lo - 1e-12);
        }
    }
}
