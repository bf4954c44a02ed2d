//! Rendered yes/no existence scenes and a decoder whose weights are wired to
//! answer them from object evidence and a background prior.
//!
//! Residual layout of the scene model:
//!
//! | dims    | meaning                                    |
//! |---------|--------------------------------------------|
//! | 0..4    | object class features (visual tokens)      |
//! | 4..8    | background texture class (visual tokens)   |
//! | 8..12   | queried class (class-name token)           |
//! | 12      | answer evidence, read out as yes vs. no    |
//! | 13      | start-of-sequence marker                   |
//! | 14      | visual sink channel                        |
//! | 15      | constant carried by every text token       |
//! | 16..19  | extra sink channels (massive activations)  |
//! | 16..    | unstructured                               |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::ValidationRecord;
use crate::error::{Result, VliError};
use crate::model::tokens::{BOS, CLASS_BASE, NO, QUERY, YES};
use crate::model::{Matrix, Model, ModelConfig, PatchGrid};

pub const N_CLASSES: usize = 4;

const OBJ: usize = 0;
const CTX: usize = 4;
const QRY: usize = 8;
const EVIDENCE: usize = 12;
const BOS_MARK: usize = 13;
const SINK: usize = 14;
const CONST: usize = 15;
const FREE: usize = 16;

const RAW_OBJ: usize = 0;
const RAW_CTX: usize = 4;
const RAW_SINK: usize = 8;
const RAW_FREE: usize = 9;

/// Weight constants of the scene model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModelParams {
    /// Multiplier on the seeded random weights left in place.
    pub noise: f64,
    /// Gain from raw object/texture channels to feature dims.
    pub feature_gain: f64,
    pub sink_gain: f64,
    /// Spare dims that also carry the sink activation.
    pub sink_spread: usize,
    /// Magnitude of the per-dim encoder bias on unstructured dims.
    pub encoder_bias: f64,
    /// Background-texture signal in the null token, matched by every class.
    pub null_context: f64,
    pub text_constant: f64,
    /// Query-key gain of the object heads.
    pub object_match: f64,
    /// Query-key gain toward the start token in object heads.
    pub object_bos: f64,
    /// Negative query-key gain toward sink patches in object heads.
    pub object_sink_suppress: f64,
    pub object_out: f64,
    pub prior_match: f64,
    pub prior_bos: f64,
    pub prior_out: f64,
    /// Evidence removed per unit of start-token attention in prior heads.
    pub prior_bos_out: f64,
    pub sink_head_gain: f64,
    /// `(layer, head)` pairs wired as object heads.
    pub object_heads: Vec<(usize, usize)>,
    pub prior_heads: Vec<(usize, usize)>,
    pub sink_heads: Vec<(usize, usize)>,
    /// Logit scale of the evidence readout.
    pub readout_gain: f64,
    /// Evidence level at which yes and no tie.
    pub readout_threshold: f64,
    /// Logit given to every non-answer token.
    pub other_logit: f64,
}

impl Default for SceneModelParams {
    fn default() -> Self {
        let l = 6;
        let mut object_heads: Vec<(usize, usize)> = (0..l).map(|i| (i, 0)).collect();
        object_heads.extend([(0, 2), (1, 2)]);
        Self {
            noise: 0.1,
            feature_gain: 2.0,
            sink_gain: 4.0,
            sink_spread: 3,
            encoder_bias: 0.3,
            null_context: 0.7,
            text_constant: 8.0,
            object_match: 1.6,
            object_bos: 1.65,
            object_sink_suppress: 0.5,
            object_out: 0.25,
            prior_match: 1.3,
            prior_bos: 1.5,
            prior_out: 0.3,
            prior_bos_out: 0.8,
            sink_head_gain: 0.8,
            object_heads,
            prior_heads: vec![(1, 1), (3, 1)],
            sink_heads: (0..l).map(|i| (i, 3)).collect(),
            readout_gain: 4.0,
            readout_threshold: 1.5,
            other_logit: -10.0,
        }
    }
}

/// Default configuration of the scene model: 6 layers, 4 heads, width 64,
/// 64-token vocabulary, 8×8 grid of 16-dim patches.
pub fn scene_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::default()
    }
}

fn check_head(config: &ModelConfig, (l, h): (usize, usize)) -> Result<()> {
    if l >= config.n_layers || h >= config.n_heads {
        return Err(VliError::config(
            "heads",
            format!("({l}, {h}) is outside the model"),
        ));
    }
    Ok(())
}

fn clear_head(m: &mut Model, l: usize, h: usize) {
    let d = m.config.d_model;
    let hd = m.config.head_dim();
    let layer = &mut m.layers[l];
    for r in h * hd..(h + 1) * hd {
        for c in 0..d {
            layer.wq.set(r, c, 0.0);
            layer.wk.set(r, c, 0.0);
            layer.wv.set(r, c, 0.0);
            layer.wo.set(c, r, 0.0);
        }
    }
}

fn scale(m: &mut Matrix, s: f64) {
    m.data.iter_mut().for_each(|w| *w *= s);
}

/// Seeded random decoder with the scene circuitry written over it.
pub fn build_scene_model(params: &SceneModelParams, config: &ModelConfig) -> Result<Model> {
    let config = config.clone();
    let mut m = Model::build(config.clone())?;
    let d = config.d_model;
    let hd = config.head_dim();
    if d < FREE + params.sink_spread + 1
        || config.patch_dim <= RAW_FREE
        || config.vocab_size < CLASS_BASE + N_CLASSES
        || hd < 6
    {
        return Err(VliError::config("model", "too small for the scene layout"));
    }
    for &head in params
        .object_heads
        .iter()
        .chain(&params.prior_heads)
        .chain(&params.sink_heads)
    {
        check_head(&config, head)?;
    }

    // encoder: structured channels map one-to-one, spare raw dims stay random
    let random_proj = m.patch_proj.clone();
    m.patch_proj.data.iter_mut().for_each(|w| *w = 0.0);
    for k in 0..N_CLASSES {
        m.patch_proj.set(OBJ + k, RAW_OBJ + k, params.feature_gain);
        m.patch_proj.set(CTX + k, RAW_CTX + k, params.feature_gain);
    }
    m.patch_proj.set(SINK, RAW_SINK, params.sink_gain);
    for r in FREE..FREE + params.sink_spread {
        m.patch_proj.set(r, RAW_SINK, params.sink_gain);
    }
    for r in FREE..d {
        for c in RAW_FREE..config.patch_dim {
            m.patch_proj.set(r, c, random_proj.get(r, c) * params.noise);
        }
    }
    for (i, b) in m.patch_bias.iter_mut().enumerate() {
        *b = if i < FREE {
            0.0
        } else {
            params.encoder_bias * b.signum()
        };
    }
    m.null_embed = m.patch_bias.clone();
    for k in 0..N_CLASSES {
        m.null_embed[CTX + k] = params.null_context;
    }

    for t in 0..config.vocab_size {
        for c in 0..d {
            let v = if c < FREE {
                0.0
            } else {
                m.tok_embed.get(t, c) * params.noise
            };
            m.tok_embed.set(t, c, v);
        }
        m.tok_embed.set(t, CONST, params.text_constant);
    }
    m.tok_embed.set(BOS, BOS_MARK, 1.0);
    for k in 0..N_CLASSES {
        m.tok_embed.set(CLASS_BASE + k, QRY + k, 1.0);
    }

    // random weights stay as background noise that never writes structured dims
    for layer in &mut m.layers {
        for w in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.w1,
            &mut layer.w2,
        ] {
            scale(w, params.noise);
        }
        for r in 0..FREE {
            for c in 0..layer.wo.cols {
                layer.wo.set(r, c, 0.0);
            }
            for c in 0..layer.w2.cols {
                layer.w2.set(r, c, 0.0);
            }
        }
    }

    for &(l, h) in &params.object_heads {
        clear_head(&mut m, l, h);
        let base = h * hd;
        let layer = &mut m.layers[l];
        for k in 0..N_CLASSES {
            layer.wq.set(base + k, QRY + k, params.object_match);
            layer.wk.set(base + k, OBJ + k, params.object_match);
            layer.wv.set(base + k, OBJ + k, 1.0);
            layer.wo.set(EVIDENCE, base + k, params.object_out);
        }
        layer.wq.set(base + 4, CONST, params.object_bos);
        layer.wk.set(base + 4, BOS_MARK, params.object_bos);
        layer.wq.set(base + 5, CONST, params.object_sink_suppress);
        layer.wk.set(base + 5, SINK, -params.object_sink_suppress);
    }
    for &(l, h) in &params.prior_heads {
        clear_head(&mut m, l, h);
        let base = h * hd;
        let layer = &mut m.layers[l];
        for k in 0..N_CLASSES {
            layer.wq.set(base + k, QRY + k, params.prior_match);
            layer.wk.set(base + k, CTX + k, params.prior_match);
            layer.wv.set(base + k, CTX + k, 1.0);
            layer.wo.set(EVIDENCE, base + k, params.prior_out);
        }
        layer.wq.set(base + 4, CONST, params.prior_bos);
        layer.wk.set(base + 4, BOS_MARK, params.prior_bos);
        layer.wv.set(base + 4, BOS_MARK, 1.0);
        layer.wo.set(EVIDENCE, base + 4, -params.prior_bos_out);
    }
    for &(l, h) in &params.sink_heads {
        let base = h * hd;
        let layer = &mut m.layers[l];
        for c in 0..d {
            layer.wq.set(base, c, 0.0);
            layer.wk.set(base, c, 0.0);
        }
        layer.wq.set(base, CONST, params.sink_head_gain);
        layer.wk.set(base, SINK, params.sink_head_gain);
    }

    for t in 0..config.vocab_size {
        for c in 0..d {
            let v = if t == YES || t == NO {
                0.0
            } else {
                m.w_out.get(t, c) * params.noise
            };
            m.w_out.set(t, c, v);
        }
        m.b_out[t] = params.other_logit;
    }
    let half = params.readout_gain / 2.0;
    m.w_out.set(YES, EVIDENCE, half);
    m.w_out.set(NO, EVIDENCE, -half);
    m.b_out[YES] = -half * params.readout_threshold;
    m.b_out[NO] = half * params.readout_threshold;
    Ok(m)
}

/// The scene model with default constants.
pub fn scene_model(seed: u64) -> Result<Model> {
    build_scene_model(&SceneModelParams::default(), &scene_model_config(seed))
}

/// Sampling constants for rendered scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub p_present: f64,
    /// Probability that the background is the queried class's usual context.
    pub p_background_match: f64,
    /// Probability of an unrelated object when the queried one is absent.
    pub p_distractor: f64,
    pub contrast: (f64, f64),
    pub texture: (f64, f64),
    pub pixel_noise: f64,
    pub max_sinks: usize,
    pub sink_amplitude: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            p_present: 0.5,
            p_background_match: 0.5,
            p_distractor: 0.5,
            contrast: (0.4, 1.2),
            texture: (0.5, 1.0),
            pixel_noise: 0.05,
            max_sinks: 2,
            sink_amplitude: 6.0,
        }
    }
}

/// One rendered yes/no question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCase {
    pub index: usize,
    pub query_class: usize,
    pub present: bool,
    pub background_class: usize,
    pub distractor_class: Option<usize>,
    pub contrast: f64,
    pub texture: f64,
    /// Patches covered by the queried object (or the distractor).
    pub object_region: Vec<usize>,
    pub sinks: Vec<usize>,
    pub image: PatchGrid,
}

impl SceneCase {
    pub fn prompt(&self) -> Vec<usize> {
        vec![BOS, QUERY, CLASS_BASE + self.query_class]
    }

    pub fn truth(&self) -> usize {
        if self.present {
            YES
        } else {
            NO
        }
    }
}

fn block(rows: usize, cols: usize, r: usize, c: usize) -> Vec<usize> {
    let mut v = vec![
        r * cols + c,
        r * cols + c + 1,
        (r + 1) * cols + c,
        (r + 1) * cols + c + 1,
    ];
    debug_assert!(r + 1 < rows);
    v.sort_unstable();
    v
}

fn other_class(rng: &mut ChaCha8Rng, not: usize) -> usize {
    let k = rng.random_range(0..N_CLASSES - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

/// Render case `index` of the stream for `seed`. `force_present` overrides
/// the presence draw.
pub fn render_case(
    params: &SceneParams,
    config: &ModelConfig,
    seed: u64,
    index: usize,
    force_present: Option<bool>,
) -> Result<SceneCase> {
    let (rows, cols, pd) = (config.grid_rows, config.grid_cols, config.patch_dim);
    if rows < 2 || cols < 2 || pd <= RAW_FREE {
        return Err(VliError::config("model", "grid too small for scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let query_class = rng.random_range(0..N_CLASSES);
    let drawn_present = rng.random_bool(params.p_present);
    let present = force_present.unwrap_or(drawn_present);
    let background_class = if rng.random_bool(params.p_background_match) {
        query_class
    } else {
        other_class(&mut rng, query_class)
    };
    let contrast = rng.random_range(params.contrast.0..=params.contrast.1);
    let texture = rng.random_range(params.texture.0..=params.texture.1);
    let (r, c) = (rng.random_range(0..rows - 1), rng.random_range(0..cols - 1));
    let wants_distractor = rng.random_bool(params.p_distractor);
    let distractor_class =
        (!present && wants_distractor).then(|| other_class(&mut rng, query_class));
    let object_region = if present || distractor_class.is_some() {
        block(rows, cols, r, c)
    } else {
        Vec::new()
    };
    let n_sinks = rng.random_range(0..=params.max_sinks);
    let mut sinks = Vec::with_capacity(n_sinks);
    while sinks.len() < n_sinks {
        let p = rng.random_range(0..rows * cols);
        if !object_region.contains(&p) && !sinks.contains(&p) {
            sinks.push(p);
        }
    }
    sinks.sort_unstable();

    let noise = Normal::new(0.0, params.pixel_noise)
        .map_err(|e| VliError::param("pixel_noise", e.to_string()))?;
    let object_class = if present {
        Some(query_class)
    } else {
        distractor_class
    };
    let mut image = PatchGrid::zeros(rows, cols, pd);
    for p in 0..rows * cols {
        let patch = image.patch_mut(p);
        if sinks.contains(&p) {
            patch[RAW_SINK] = params.sink_amplitude;
        } else if let (Some(k), true) = (object_class, object_region.contains(&p)) {
            patch[RAW_OBJ + k] = contrast;
        } else {
            patch[RAW_CTX + background_class] = texture;
        }
        for v in patch.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(SceneCase {
        index,
        query_class,
        present,
        background_class,
        distractor_class,
        contrast,
        texture,
        object_region,
        sinks,
        image,
    })
}

/// Object-present scenes with the object block as ground-truth region.
pub fn validation_set(
    params: &SceneParams,
    config: &ModelConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<ValidationRecord>> {
    (0..n)
        .map(|i| {
            let case = render_case(params, config, seed, i, Some(true))?;
            Ok(ValidationRecord {
                prompt: case.prompt(),
                target_token: YES,
                gt_region: case.object_region.clone(),
                image: case.image,
            })
        })
        .collect()
}
