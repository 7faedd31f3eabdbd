//! Toy denoiser: per block, cross-attention over prompt tokens followed by
//! self-attention, each with a residual update and row renormalization.
//!
//! Weights are a rectangular identity plus uniform noise in `[−1/√d, 1/√d]`.
//! Query and key weights carry a `√d` gain, which puts unit-norm rows on the
//! scale a layer norm would give them before projection.

use crate::attention::{ProjectionWeights, Qkv};
use crate::error::Result;
use crate::linalg::{matmul, matmul_transposed, row_softmax, unit_normalize_rows, Matrix};
use crate::masking::AttentionMap;
use crate::rng::{tags, SplitMix64};

use super::config::RunConfig;
use super::scene::random_unit;

/// Prompt cross-attention weights: `W_Q`, `W_K` (`d × d_k`), `W_V` (`d × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct CrossWeights {
    pub query: Matrix<f64>,
    pub key: Matrix<f64>,
    pub value: Matrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub cross: CrossWeights,
    pub attn: ProjectionWeights<f64>,
    /// Output projection `d_k × d`.
    pub out: Matrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    pub blocks: Vec<Block>,
    /// Positional encoding added to self-attention query/key inputs, `P × d`.
    pub positions: Matrix<f64>,
    pub position_strength: f64,
    pub prompt_strength: f64,
    pub attention_strength: f64,
}

/// Result of a prompt cross-attention layer on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossOutput {
    /// Renormalized embeddings after the residual update.
    pub x: Matrix<f64>,
    /// One map over patches per subject token.
    pub maps: Vec<AttentionMap<f64>>,
}

fn perturbed_eye(rows: usize, cols: usize, gain: f64, rng: &mut SplitMix64) -> Matrix<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    let mut m = Matrix::eye(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = m.get(r, c) + rng.uniform(-bound, bound);
            m.set(r, c, gain * v);
        }
    }
    m
}

/// Smooth field of unit vectors: random anchors on a coarse grid, bilinearly
/// interpolated to every patch.
fn positional_field(config: &RunConfig, rng: &mut SplitMix64) -> Result<Matrix<f64>> {
    let (h, w, d) = (config.grid_height, config.grid_width, config.embed_dim);
    let ah = h.div_ceil(4).max(2);
    let aw = w.div_ceil(4).max(2);
    let anchors: Vec<Vec<f64>> = (0..ah * aw).map(|_| random_unit(d, rng)).collect();
    let coord = |i: usize, n: usize, a: usize| {
        if n == 1 {
            0.0
        } else {
            i as f64 * (a - 1) as f64 / (n - 1) as f64
        }
    };
    let raw = Matrix::from_fn(h * w, d, |p, k| {
        let (y, x) = (coord(p / w, h, ah), coord(p % w, w, aw));
        let (y0, x0) = ((y.floor() as usize).min(ah - 2), (x.floor() as usize).min(aw - 2));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |r: usize, c: usize| anchors[r * aw + c][k];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    });
    unit_normalize_rows(&raw)
}

impl ToyDenoiser {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut rng = SplitMix64::for_purpose(config.seed, tags::WEIGHTS);
        let (d, dk) = (config.embed_dim, config.proj_dim);
        let gain = (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let cross = CrossWeights {
                query: perturbed_eye(d, dk, gain, &mut rng),
                key: perturbed_eye(d, dk, gain, &mut rng),
                value: perturbed_eye(d, d, 1.0, &mut rng),
            };
            let attn = ProjectionWeights::new(
                perturbed_eye(d, dk, gain, &mut rng),
                perturbed_eye(d, dk, gain, &mut rng),
                perturbed_eye(d, dk, 1.0, &mut rng),
                config.num_heads,
            )?;
            let out = perturbed_eye(dk, d, 1.0, &mut rng);
            blocks.push(Block { cross, attn, out });
        }
        Ok(Self {
            blocks,
            positions: positional_field(config, &mut rng)?,
            position_strength: config.position_strength,
            prompt_strength: config.prompt_strength,
            attention_strength: config.attention_strength,
        })
    }

    /// Prompt cross-attention of block `layer`. Patches attend over tokens for
    /// the residual update; each subject token's map is the softmax over
    /// patches of its logit column.
    pub fn cross_attention(&self, layer: usize, image: usize, x: &Matrix<f64>, tokens: &Matrix<f64>, subjects: usize) -> Result<CrossOutput> {
        let w = &self.blocks[layer].cross;
        let q = matmul(x, &w.query)?;
        let k = matmul(tokens, &w.key)?;
        let scale = 1.0 / (w.query.cols() as f64).sqrt();
        let logits = matmul_transposed(&q, &k)?.scale(scale);
        let weights = row_softmax(&logits)?;
        let values = matmul(tokens, &w.value)?;
        let update = matmul(&weights, &values)?.scale(self.prompt_strength);
        let x = unit_normalize_rows(&x.add(&update)?)?;
        let columns = row_softmax(&logits.transpose())?;
        let maps = (0..subjects)
            .map(|s| AttentionMap::new(image, columns.row(s).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossOutput { x, maps })
    }

    /// Q and K from the position-augmented input, V from the input itself.
    pub fn project(&self, layer: usize, x_in: &Matrix<f64>) -> Result<Qkv<f64>> {
        let w = &self.blocks[layer].attn;
        let z = x_in.add(&self.positions.scale(self.position_strength))?;
        Ok(Qkv {
            q: matmul(&z, &w.query)?,
            k: matmul(&z, &w.key)?,
            v: matmul(x_in, &w.value)?,
        })
    }

    /// `normalize_rows(x_in + α · h · W_O)`.
    pub fn residual(&self, layer: usize, x_in: &Matrix<f64>, h: &Matrix<f64>) -> Result<Matrix<f64>> {
        let update = matmul(h, &self.blocks[layer].out)?.scale(self.attention_strength);
        unit_normalize_rows(&x_in.add(&update)?)
    }
}
