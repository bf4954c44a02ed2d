//! A miniature multimodal decoder used as the substrate for introspection.
//!
//! The sequence layout is `[visual tokens ⊕ text tokens]`. Visual tokens see
//! each other freely, text tokens see every visual token plus the text before
//! them. Blocks are pre-norm (RMSNorm) attention + GELU feed-forward, and no
//! positional encoding is used: causal masking alone orders the text.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VliError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{greedy_decode, StepTrace, VisualPrefix};

/// Token id conventions shared by the synthetic scenes and the CLI.
pub mod tokens {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const YES: usize = 2;
    pub const NO: usize = 3;
    pub const QUERY: usize = 4;
    /// First object-class token; class `k` is `CLASS_BASE + k`.
    pub const CLASS_BASE: usize = 5;
}

fn default_ffn_dim() -> usize {
    0
}

fn default_eos() -> Option<usize> {
    Some(tokens::EOS)
}

/// Model dimensions and seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    /// Feed-forward width; `0` means `4 * d_model`.
    #[serde(default = "default_ffn_dim")]
    pub ffn_dim: usize,
    #[serde(default = "default_eos")]
    pub eos_token: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            vocab_size: 64,
            grid_rows: 8,
            grid_cols: 8,
            patch_dim: 16,
            ffn_dim: 0,
            eos_token: default_eos(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_visual(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.d_model
        } else {
            self.ffn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("patch_dim", self.patch_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(VliError::config(field, "must be positive"));
            }
        }
        if self.n_layers < 2 {
            return Err(VliError::config("n_layers", "need at least 2 layers"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(VliError::config(
                "d_model",
                format!("{} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.vocab_size < 2 {
            return Err(VliError::config("vocab_size", "need at least 2 tokens"));
        }
        if let Some(eos) = self.eos_token {
            if eos >= self.vocab_size {
                return Err(VliError::config("eos_token", "outside vocabulary"));
            }
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `out = self · x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Weight set of the toy decoder. Treated as immutable once built; weight
/// surgery happens on clones.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `d_model × patch_dim`
    pub patch_proj: Matrix,
    pub patch_bias: Vec<f64>,
    pub null_embed: Vec<f64>,
    /// `vocab_size × d_model`
    pub tok_embed: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
    /// `vocab_size × d_model`
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Seeded Gaussian source; every tensor draws from its own ChaCha stream so
/// adding a tensor never perturbs the others.
struct WeightRng {
    seed: u64,
    stream: u64,
}

impl WeightRng {
    fn gaussian(&mut self, n: usize, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        self.stream += 1;
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix {
            rows,
            cols,
            data: self.gaussian(rows * cols, scale),
        }
    }
}

/// Provenance of a visual feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Null,
    AnchorOnly,
    ContextOnly,
}

/// `N_v` feature rows of width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub rows: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Raw image as a grid of patch vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn zeros(rows: usize, cols: usize, patch_dim: usize) -> Self {
        Self {
            rows,
            cols,
            patch_dim,
            data: vec![0.0; rows * cols * patch_dim],
        }
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    /// Nested `rows × cols × patch_dim` arrays.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| self.patch(r * self.cols + c).to_vec())
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let rows = nested.len();
        let cols = nested.first().map_or(0, Vec::len);
        let patch_dim = nested.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if rows == 0 || cols == 0 || patch_dim == 0 {
            return Err(VliError::InvalidInput("empty patch grid".into()));
        }
        let mut data = Vec::with_capacity(rows * cols * patch_dim);
        for (r, row) in nested.iter().enumerate() {
            if row.len() != cols {
                return Err(VliError::shape(format!(
                    "grid row {r} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            for (c, patch) in row.iter().enumerate() {
                if patch.len() != patch_dim {
                    return Err(VliError::shape(format!(
                        "patch ({r},{c}) has dim {}, expected {patch_dim}",
                        patch.len()
                    )));
                }
                if patch.iter().any(|v| !v.is_finite()) {
                    return Err(VliError::InvalidInput(format!(
                        "non-finite value in patch ({r},{c})"
                    )));
                }
                data.extend_from_slice(patch);
            }
        }
        Ok(Self {
            rows,
            cols,
            patch_dim,
            data,
        })
    }
}

impl Serialize for PatchGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_nested().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PatchGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        PatchGrid::from_nested(&nested).map_err(serde::de::Error::custom)
    }
}

/// Per-layer residual corrections and their scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub deltas: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl SteeringPlan {
    pub fn new(deltas: Vec<Vec<f64>>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(VliError::param(
                "alpha",
                format!("must be finite and >= 0, got {alpha}"),
            ));
        }
        if deltas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VliError::InvalidInput("non-finite steering vector".into()));
        }
        Ok(Self { deltas, alpha })
    }
}

impl Model {
    /// Seeded random weights. Two builds from the same config are bit-identical.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width();
        let v = config.vocab_size;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(2 * config.n_layers);
        let mut rng = WeightRng {
            seed: config.seed,
            stream: 0,
        };
        let patch_proj = rng.matrix(d, config.patch_dim, inv(config.patch_dim));
        let patch_bias = rng.gaussian(d, 0.1);
        let null_embed = rng.gaussian(d, 1.0);
        let tok_embed = rng.matrix(v, d, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; d],
                wq: rng.matrix(d, d, inv(d)),
                wk: rng.matrix(d, d, inv(d)),
                wv: rng.matrix(d, d, inv(d)),
                wo: rng.matrix(d, d, inv(d) * resid),
                ffn_norm: vec![1.0; d],
                w1: rng.matrix(f, d, inv(d)),
                b1: vec![0.0; f],
                w2: rng.matrix(d, f, inv(f) * resid),
                b2: vec![0.0; d],
            })
            .collect();
        let w_out = rng.matrix(v, d, inv(d));
        Ok(Self {
            config,
            patch_proj,
            patch_bias,
            null_embed,
            tok_embed,
            layers,
            final_norm: vec![1.0; d],
            w_out,
            b_out: vec![0.0; v],
        })
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            (
                "patch_proj".into(),
                vec![self.patch_proj.rows, self.patch_proj.cols],
                &self.patch_proj.data,
            ),
            (
                "patch_bias".into(),
                vec![self.patch_bias.len()],
                &self.patch_bias,
            ),
            (
                "null_embed".into(),
                vec![self.null_embed.len()],
                &self.null_embed,
            ),
            (
                "tok_embed".into(),
                vec![self.tok_embed.rows, self.tok_embed.cols],
                &self.tok_embed.data,
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let mat = |m: &Matrix| vec![m.rows, m.cols];
            out.push((
                format!("layers.{i}.attn_norm"),
                vec![l.attn_norm.len()],
                &l.attn_norm,
            ));
            out.push((format!("layers.{i}.wq"), mat(&l.wq), &l.wq.data));
            out.push((format!("layers.{i}.wk"), mat(&l.wk), &l.wk.data));
            out.push((format!("layers.{i}.wv"), mat(&l.wv), &l.wv.data));
            out.push((format!("layers.{i}.wo"), mat(&l.wo), &l.wo.data));
            out.push((
                format!("layers.{i}.ffn_norm"),
                vec![l.ffn_norm.len()],
                &l.ffn_norm,
            ));
            out.push((format!("layers.{i}.w1"), mat(&l.w1), &l.w1.data));
            out.push((format!("layers.{i}.b1"), vec![l.b1.len()], &l.b1));
            out.push((format!("layers.{i}.w2"), mat(&l.w2), &l.w2.data));
            out.push((format!("layers.{i}.b2"), vec![l.b2.len()], &l.b2));
        }
        out.push((
            "final_norm".into(),
            vec![self.final_norm.len()],
            &self.final_norm,
        ));
        out.push((
            "w_out".into(),
            vec![self.w_out.rows, self.w_out.cols],
            &self.w_out.data,
        ));
        out.push(("b_out".into(), vec![self.b_out.len()], &self.b_out));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![
            &mut self.patch_proj.data,
            &mut self.patch_bias,
            &mut self.null_embed,
            &mut self.tok_embed.data,
        ];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq.data);
            out.push(&mut l.wk.data);
            out.push(&mut l.wv.data);
            out.push(&mut l.wo.data);
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w1.data);
            out.push(&mut l.b1);
            out.push(&mut l.w2.data);
            out.push(&mut l.b2);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.w_out.data);
        out.push(&mut self.b_out);
        out
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, data) in self.named_tensors() {
            for v in data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Project raw patches to visual feature rows.
    pub fn encode_visual(&self, image: &PatchGrid) -> Result<VisualFeatures> {
        let c = &self.config;
        if image.rows != c.grid_rows || image.cols != c.grid_cols || image.patch_dim != c.patch_dim
        {
            return Err(VliError::shape(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                image.rows, image.cols, image.patch_dim, c.grid_rows, c.grid_cols, c.patch_dim
            )));
        }
        let rows = (0..image.n_patches())
            .map(|i| {
                let mut f = self.patch_proj.matvec(image.patch(i));
                for (x, b) in f.iter_mut().zip(&self.patch_bias) {
                    *x += b;
                }
                f
            })
            .collect();
        Ok(VisualFeatures {
            rows,
            provenance: Provenance::Real,
        })
    }

    /// The learned null token replicated over the grid.
    pub fn null_visual(&self) -> VisualFeatures {
        VisualFeatures {
            rows: vec![self.null_embed.clone(); self.config.n_visual()],
            provenance: Provenance::Null,
        }
    }

    /// Copy whose visual encoder ignores the image: projection zeroed and bias
    /// pinned to the null embedding, so real and null features coincide.
    pub fn vision_blind(&self) -> Model {
        let mut m = self.clone();
        m.patch_proj.data.iter_mut().for_each(|w| *w = 0.0);
        m.patch_bias = m.null_embed.clone();
        m
    }
}
