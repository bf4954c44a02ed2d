use serde::{Deserialize, Serialize};

use super::{dot, Layer, Model, SteeringPlan, VisualFeatures};
use crate::error::{Result, VliError};
use crate::numerics::{softmax, LogitVector, TokenDistribution};

const NORM_EPS: f64 = 1e-6;

/// Everything observed at the final sequence position during one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Residual stream after each block, `n_layers × d_model`. When steering
    /// is active these are the steered states.
    pub hidden: Vec<Vec<f64>>,
    /// Visual slice of each head's attention row, `n_layers × n_heads × N_v`.
    pub attn: Vec<Vec<Vec<f64>>>,
    /// Text slice of the same rows, `n_layers × n_heads × text_len`.
    pub attn_text: Vec<Vec<Vec<f64>>>,
    pub logits: LogitVector,
}

impl StepTrace {
    pub fn distribution(&self) -> TokenDistribution {
        softmax(&self.logits)
    }

    pub fn final_hidden(&self) -> &[f64] {
        self.hidden.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attn.first().map_or(0, Vec::len)
    }
}

fn rms_norm(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-layer keys and values of the visual tokens. Visual tokens never attend
/// to text, so these depend on the visual features alone and can be shared by
/// every pass over the same features.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrefix {
    n_visual: usize,
    d_model: usize,
    /// `n_layers` blocks of `n_visual × d_model`, row-major.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl VisualPrefix {
    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }
}

/// Softmax of `scores` in place.
fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

struct Scratch {
    normed: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    mixed: Vec<f64>,
    proj: Vec<f64>,
    ff: Vec<f64>,
}

impl Scratch {
    fn new(rows: usize, d: usize, f: usize) -> Self {
        Self {
            normed: vec![0.0; rows * d],
            q: vec![0.0; rows * d],
            k: vec![0.0; rows * d],
            v: vec![0.0; rows * d],
            mixed: vec![0.0; rows * d],
            proj: vec![0.0; d],
            ff: vec![0.0; f],
        }
    }
}

impl Layer {
    fn project_qkv(&self, x: &[f64], d: usize, s: &mut Scratch) {
        for (p, row) in x.chunks_exact(d).enumerate() {
            let span = p * d..(p + 1) * d;
            rms_norm(row, &self.attn_norm, &mut s.normed[span.clone()]);
            self.wq
                .matvec_into(&s.normed[span.clone()], &mut s.q[span.clone()]);
            self.wk
                .matvec_into(&s.normed[span.clone()], &mut s.k[span.clone()]);
            self.wv.matvec_into(&s.normed[span.clone()], &mut s.v[span]);
        }
    }

    /// Output projection, residual add and feed-forward for every row of `x`.
    fn finish_block(&self, x: &mut [f64], d: usize, s: &mut Scratch) {
        for (p, row) in x.chunks_exact_mut(d).enumerate() {
            let span = p * d..(p + 1) * d;
            self.wo.matvec_into(&s.mixed[span.clone()], &mut s.proj);
            for (xi, o) in row.iter_mut().zip(&s.proj) {
                *xi += o;
            }
            rms_norm(row, &self.ffn_norm, &mut s.normed[span]);
            self.w1
                .matvec_into(&s.normed[p * d..(p + 1) * d], &mut s.ff);
            for (f, b) in s.ff.iter_mut().zip(&self.b1) {
                *f = gelu(*f + b);
            }
            self.w2.matvec_into(&s.ff, &mut s.proj);
            for ((xi, o), b) in row.iter_mut().zip(&s.proj).zip(&self.b2) {
                *xi += o + b;
            }
        }
    }
}

/// Weighted sum of value rows into `out`.
fn mix_into(
    out: &mut [f64],
    weights: &[f64],
    values: &[f64],
    d: usize,
    hs: std::ops::Range<usize>,
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &a) in weights.iter().enumerate() {
        let vj = &values[j * d + hs.start..j * d + hs.end];
        for (o, vv) in out.iter_mut().zip(vj) {
            *o += a * vv;
        }
    }
}

impl Model {
    fn check_visual(&self, visual: &VisualFeatures) -> Result<()> {
        let c = &self.config;
        if visual.rows.len() != c.n_visual() {
            return Err(VliError::shape(format!(
                "{} visual rows, expected {}",
                visual.rows.len(),
                c.n_visual()
            )));
        }
        if let Some(r) = visual.rows.iter().position(|r| r.len() != c.d_model) {
            return Err(VliError::shape(format!("visual row {r} has wrong width")));
        }
        Ok(())
    }

    fn check_text(
        &self,
        prefix: &VisualPrefix,
        text: &[usize],
        steering: Option<&SteeringPlan>,
    ) -> Result<()> {
        let c = &self.config;
        if prefix.n_visual != c.n_visual()
            || prefix.d_model != c.d_model
            || prefix.n_layers() != c.n_layers
        {
            return Err(VliError::shape(
                "visual prefix was built for a different model",
            ));
        }
        if text.is_empty() {
            return Err(VliError::InvalidInput("empty text prefix".into()));
        }
        if let Some(t) = text.iter().find(|&&t| t >= c.vocab_size) {
            return Err(VliError::InvalidInput(format!(
                "token {t} outside vocabulary"
            )));
        }
        if let Some(plan) = steering {
            if plan.deltas.len() != c.n_layers {
                return Err(VliError::shape(format!(
                    "steering has {} layers, model has {}",
                    plan.deltas.len(),
                    c.n_layers
                )));
            }
            if plan.deltas.iter().any(|d| d.len() != c.d_model) {
                return Err(VliError::shape("steering vector width != d_model"));
            }
            if !(plan.alpha >= 0.0) {
                return Err(VliError::param("alpha", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Run the visual tokens through every block and keep their keys and values.
    pub fn visual_prefix(&self, visual: &VisualFeatures) -> Result<VisualPrefix> {
        self.check_visual(visual)?;
        let c = &self.config;
        let (d, nv, hd) = (c.d_model, c.n_visual(), c.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x: Vec<f64> = visual.rows.concat();
        let mut s = Scratch::new(nv, d, c.ffn_width());
        let mut scores = vec![0.0; nv];
        let mut keys = Vec::with_capacity(c.n_layers);
        let mut values = Vec::with_capacity(c.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            layer.project_qkv(&x, d, &mut s);
            keys.push(s.k.clone());
            values.push(s.v.clone());
            if li + 1 == c.n_layers {
                // the last block's visual outputs are never read
                break;
            }
            for h in 0..c.n_heads {
                let hs = h * hd..(h + 1) * hd;
                for p in 0..nv {
                    let qp = &s.q[p * d + hs.start..p * d + hs.end];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc = dot(qp, &s.k[j * d + hs.start..j * d + hs.end]) * scale;
                    }
                    softmax_in_place(&mut scores);
                    mix_into(
                        &mut s.mixed[p * d + hs.start..p * d + hs.end],
                        &scores,
                        &s.v,
                        d,
                        hs.clone(),
                    );
                }
            }
            layer.finish_block(&mut x, d, &mut s);
        }
        Ok(VisualPrefix {
            n_visual: nv,
            d_model: d,
            keys,
            values,
        })
    }

    /// One forward pass over `[visual ⊕ text]`.
    ///
    /// With a steering plan, `alpha * deltas[l]` is added to the final
    /// position's residual stream right after block `l`, before block `l + 1`
    /// reads it. Logits come from the last (steered) state.
    pub fn forward_step(
        &self,
        visual: &VisualFeatures,
        text: &[usize],
        steering: Option<&SteeringPlan>,
    ) -> Result<StepTrace> {
        let prefix = self.visual_prefix(visual)?;
        self.forward_with_prefix(&prefix, text, steering)
    }

    /// [`Model::forward_step`] over precomputed visual keys and values.
    pub fn forward_with_prefix(
        &self,
        prefix: &VisualPrefix,
        text: &[usize],
        steering: Option<&SteeringPlan>,
    ) -> Result<StepTrace> {
        self.check_text(prefix, text, steering)?;
        let c = &self.config;
        let (d, nv, hd, n_heads) = (c.d_model, c.n_visual(), c.head_dim(), c.n_heads);
        let nt = text.len();
        let last = nt - 1;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Vec::with_capacity(nt * d);
        for &t in text {
            x.extend_from_slice(self.tok_embed.row(t));
        }
        let mut s = Scratch::new(nt, d, c.ffn_width());
        let mut scores = vec![0.0; nv + nt];
        let mut hidden = Vec::with_capacity(c.n_layers);
        let mut attn = Vec::with_capacity(c.n_layers);
        let mut attn_text = Vec::with_capacity(c.n_layers);

        for (li, layer) in self.layers.iter().enumerate() {
            layer.project_qkv(&x, d, &mut s);
            let (pk, pv) = (&prefix.keys[li], &prefix.values[li]);
            let mut layer_attn = vec![Vec::new(); n_heads];
            let mut layer_attn_text = vec![Vec::new(); n_heads];
            for h in 0..n_heads {
                let hs = h * hd..(h + 1) * hd;
                for i in 0..nt {
                    // text sees every visual token and the text up to itself
                    let visible = nv + i + 1;
                    let qi = &s.q[i * d + hs.start..i * d + hs.end];
                    for j in 0..nv {
                        scores[j] = dot(qi, &pk[j * d + hs.start..j * d + hs.end]) * scale;
                    }
                    for j in 0..=i {
                        scores[nv + j] = dot(qi, &s.k[j * d + hs.start..j * d + hs.end]) * scale;
                    }
                    softmax_in_place(&mut scores[..visible]);
                    let out = &mut s.mixed[i * d + hs.start..i * d + hs.end];
                    mix_into(out, &scores[..nv], pv, d, hs.clone());
                    for (j, &a) in scores[nv..visible].iter().enumerate() {
                        let vj = &s.v[j * d + hs.start..j * d + hs.end];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += a * vv;
                        }
                    }
                    if i == last {
                        layer_attn[h] = scores[..nv].to_vec();
                        layer_attn_text[h] = scores[nv..visible].to_vec();
                    }
                }
            }
            layer.finish_block(&mut x, d, &mut s);

            if let Some(plan) = steering {
                let tail = &mut x[last * d..(last + 1) * d];
                for (xi, delta) in tail.iter_mut().zip(&plan.deltas[li]) {
                    *xi += plan.alpha * delta;
                }
            }

            hidden.push(x[last * d..(last + 1) * d].to_vec());
            attn.push(layer_attn);
            attn_text.push(layer_attn_text);
        }

        let mut final_state = vec![0.0; d];
        rms_norm(
            &x[last * d..(last + 1) * d],
            &self.final_norm,
            &mut final_state,
        );
        let mut logits = self.w_out.matvec(&final_state);
        for (l, b) in logits.iter_mut().zip(&self.b_out) {
            *l += b;
        }
        Ok(StepTrace {
            hidden,
            attn,
            attn_text,
            logits: LogitVector::new(logits)?,
        })
    }

    /// Independent unsteered passes evaluated in parallel, results in input order.
    pub fn forward_batch(&self, inputs: &[(&VisualFeatures, &[usize])]) -> Result<Vec<StepTrace>> {
        use rayon::prelude::*;
        inputs
            .par_iter()
            .map(|(v, t)| self.forward_step(v, t, None))
            .collect()
    }
}

/// Greedy decoding; returns only the generated tokens, stopping after
/// `max_len` tokens or once the end token is emitted.
pub fn greedy_decode(
    model: &Model,
    visual: &VisualFeatures,
    prompt: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(VliError::param("max_len", "must be >= 1"));
    }
    let prefix = model.visual_prefix(visual)?;
    let mut text = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let token = model
            .forward_with_prefix(&prefix, &text, None)?
            .logits
            .argmax();
        generated.push(token);
        text.push(token);
        if Some(token) == model.config.eos_token {
            break;
        }
    }
    Ok(generated)
}
