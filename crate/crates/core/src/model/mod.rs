//! The line-descriptor network: a tokenizer that turns a subline into
//! point embeddings read from a dense descriptor map, a masked transformer
//! that summarizes them through a learned `[LINE]` slot, and a
//! message-passing signature stage that shares geometric context across the
//! lines of an image.

mod checkpoint;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_descriptor_map,
    read_descriptor_map, save_checkpoint, save_descriptor_map, write_descriptor_map, Checkpoint,
    OptimizerCheckpoint,
};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    build_adjacency, sample_points, split_into_sublines, AdjacencyMatrix, GeometryError,
    LineSegment2D, PointToken, Subline,
};
use crate::tensor::{
    mlp, multi_head_attention, AttentionWeights, BoundParams, MlpWeights, ParameterSet, Tape,
    TensorError, Var,
};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("line {id} yields {n} tokens, outside [{n_min}, {n_max}]")]
    TokenCount {
        id: u32,
        n: usize,
        n_min: usize,
        n_max: usize,
    },
    #[error("no line survives token-count filtering")]
    NoValidLines,
    #[error("lookup at ({x}, {y}) is outside the {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    #[error("descriptor map cell {cell} is not unit norm (|v| = {norm})")]
    NotUnitNorm { cell: usize, norm: f64 },
    #[error("interpolated descriptor vanishes at ({x}, {y})")]
    ZeroInterpolation { x: f64, y: f64 },
    #[error("descriptor map dimension {map} does not match model dimension {model}")]
    DimensionMismatch { map: usize, model: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: file is corrupt or truncated")]
    ChecksumMismatch,
    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Model hyperparameters. The defaults are desk-scale (trainable on a CPU
/// in minutes); much larger settings (`d = 256`, `layers = 12`,
/// `signature_layers = 7`) are equally valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Descriptor dimension D.
    pub d: usize,
    /// Transformer depth L.
    pub layers: usize,
    /// Signature-network depth M.
    pub signature_layers: usize,
    pub heads: usize,
    /// Point sampling interval in pixels.
    pub v: f64,
    /// Inclusive token-count bounds for a subline.
    pub n_min: usize,
    pub n_max: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Hidden width of the transformer/signature MLP blocks.
    pub block_hidden: usize,
    /// Hidden width of the positional and attribute embedding MLPs.
    pub embed_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 3,
            signature_layers: 2,
            heads: 4,
            v: 8.0,
            n_min: 2,
            n_max: 21,
            image_width: 320,
            image_height: 240,
            block_hidden: 128,
            embed_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::BadConfig(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.n_min < 2 {
            return Err(ModelError::BadConfig(format!(
                "n_min = {} must be >= 2",
                self.n_min
            )));
        }
        if self.n_max < self.n_min {
            return Err(ModelError::BadConfig(format!(
                "n_max = {} must be >= n_min = {}",
                self.n_max, self.n_min
            )));
        }
        if self.v.is_nan() || self.v <= 0.0 {
            return Err(ModelError::BadConfig(format!(
                "v = {} must be positive",
                self.v
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(ModelError::BadConfig(
                "image dimensions must be positive".into(),
            ));
        }
        if self.block_hidden == 0 || self.embed_hidden == 0 {
            return Err(ModelError::BadConfig(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn image_diagonal(&self) -> f64 {
        ((self.image_width as f64).powi(2) + (self.image_height as f64).powi(2)).sqrt()
    }
}

/// Grid of unit descriptor vectors at a fixed pixel stride. Cell values are
/// stored as `f32` so the on-disk format round-trips losslessly; all
/// arithmetic on them is `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    width: u32,
    height: u32,
    stride: u32,
    dim: usize,
    grid_w: usize,
    grid_h: usize,
    data: Vec<f32>,
}

impl DescriptorMap {
    pub fn new(width: u32, height: u32, stride: u32, dim: usize, data: Vec<f32>) -> Result<Self> {
        let grid_w = (width as usize).div_ceil(stride as usize);
        let grid_h = (height as usize).div_ceil(stride as usize);
        if data.len() != grid_w * grid_h * dim {
            return Err(ModelError::Malformed(format!(
                "descriptor map data length {} does not match {}x{}x{}",
                data.len(),
                grid_h,
                grid_w,
                dim
            )));
        }
        let map = Self {
            width,
            height,
            stride,
            dim,
            grid_w,
            grid_h,
            data,
        };
        for cell in 0..grid_w * grid_h {
            let norm = map
                .cell_by_index(cell)
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(ModelError::NotUnitNorm { cell, norm });
            }
        }
        Ok(map)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_width(&self) -> usize {
        self.grid_w
    }

    pub fn grid_height(&self) -> usize {
        self.grid_h
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, gx: usize, gy: usize) -> &[f32] {
        self.cell_by_index(gy * self.grid_w + gx)
    }

    fn cell_by_index(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Pixel coordinates of a cell center: cell `(gx, gy)` sits at
    /// `((gx + 0.5) * stride, (gy + 0.5) * stride)`.
    pub fn cell_center(&self, gx: usize, gy: usize) -> (f64, f64) {
        (
            (gx as f64 + 0.5) * self.stride as f64,
            (gy as f64 + 0.5) * self.stride as f64,
        )
    }

    /// Bilinear interpolation of the raw cell vectors in map coordinates
    /// (`x/stride - 0.5` convention, clamped at the border). Returns the
    /// unnormalized vector and its norm.
    pub fn interpolate_raw(&self, x: f64, y: f64) -> Result<(Vec<f64>, f64)> {
        if x < 0.0 || y < 0.0 || x > self.width as f64 || y > self.height as f64 {
            return Err(ModelError::OutOfBounds {
                x,
                y,
                width: self.width as f64,
                height: self.height as f64,
            });
        }
        let gx = x / self.stride as f64 - 0.5;
        let gy = y / self.stride as f64 - 0.5;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let fx = gx - x0;
        let fy = gy - y0;
        let clamp_x = |v: f64| (v.max(0.0) as usize).min(self.grid_w - 1);
        let clamp_y = |v: f64| (v.max(0.0) as usize).min(self.grid_h - 1);
        let (ix0, ix1) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (iy0, iy1) = (clamp_y(y0), clamp_y(y0 + 1.0));

        let mut out = vec![0.0f64; self.dim];
        let mut add = |gx: usize, gy: usize, w: f64| {
            if w == 0.0 {
                return;
            }
            for (o, &v) in out.iter_mut().zip(self.cell(gx, gy)) {
                *o += w * v as f64;
            }
        };
        add(ix0, iy0, (1.0 - fx) * (1.0 - fy));
        add(ix1, iy0, fx * (1.0 - fy));
        add(ix0, iy1, (1.0 - fx) * fy);
        add(ix1, iy1, fx * fy);

        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok((out, norm))
    }

    /// Unit-length point embedding at a pixel position.
    pub fn lookup(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        let (mut raw, norm) = self.interpolate_raw(x, y)?;
        if norm <= 1e-12 {
            return Err(ModelError::ZeroInterpolation { x, y });
        }
        raw.iter_mut().for_each(|v| *v /= norm);
        Ok(raw)
    }
}

/// Where point-token confidences come from. `Constant` is the synthetic
/// default; `Perturbed` adds deterministic per-point jitter derived from a
/// seed, standing in for a front end with varying keypoint confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConfidenceModel {
    Constant(f64),
    Perturbed { seed: u64, sigma: f64 },
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel::Constant(1.0)
    }
}

impl ConfidenceModel {
    pub fn confidence(&self, line_id: u32, sample_index: usize) -> f64 {
        match *self {
            ConfidenceModel::Constant(c) => c.clamp(0.0, 1.0),
            ConfidenceModel::Perturbed { seed, sigma } => {
                let stream = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((line_id as u64) << 20)
                    .wrapping_add(sample_index as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let n: f64 = StandardNormal.sample(&mut rng);
                (1.0 - (sigma * n).abs()).clamp(0.0, 1.0)
            }
        }
    }
}

/// Creates every model parameter with a seeded uniform
/// `(-1/sqrt(fan_in), +1/sqrt(fan_in))` init. Layer-norm scales start at one
/// and shifts at zero. Creation order is fixed, which keeps checkpoints and
/// optimizer sweeps byte-stable.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let d = config.d;
    let e = config.embed_hidden;
    let b = config.block_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();

    params.insert_uniform("e_line", [1, d], d, &mut rng)?;

    params.insert_uniform("pos_mlp.w1", [3, e], 3, &mut rng)?;
    params.insert_uniform("pos_mlp.b1", [1, e], 3, &mut rng)?;
    params.insert_uniform("pos_mlp.w2", [e, d], e, &mut rng)?;
    params.insert_uniform("pos_mlp.b2", [1, d], e, &mut rng)?;

    let msa = |params: &mut ParameterSet, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert_uniform(&format!("{prefix}.{name}"), [d, d], d, rng)?;
            params.insert_uniform(&format!("{prefix}.b{}", &name[1..]), [1, d], d, rng)?;
        }
        Ok(())
    };

    for i in 0..config.layers {
        msa(&mut params, &format!("enc{i}.msa"), &mut rng)?;
        params.insert_full(&format!("enc{i}.ln1.gamma"), [1, d], 1.0)?;
        params.insert_full(&format!("enc{i}.ln1.beta"), [1, d], 0.0)?;
        params.insert_uniform(&format!("enc{i}.mlp.w1"), [d, b], d, &mut rng)?;
        params.insert_uniform(&format!("enc{i}.mlp.b1"), [1, b], d, &mut rng)?;
        params.insert_uniform(&format!("enc{i}.mlp.w2"), [b, d], b, &mut rng)?;
        params.insert_uniform(&format!("enc{i}.mlp.b2"), [1, d], b, &mut rng)?;
        params.insert_full(&format!("enc{i}.ln2.gamma"), [1, d], 1.0)?;
        params.insert_full(&format!("enc{i}.ln2.beta"), [1, d], 0.0)?;
    }

    params.insert_uniform("attr_mlp.w1", [5, e], 5, &mut rng)?;
    params.insert_uniform("attr_mlp.b1", [1, e], 5, &mut rng)?;
    params.insert_uniform("attr_mlp.w2", [e, d], e, &mut rng)?;
    params.insert_uniform("attr_mlp.b2", [1, d], e, &mut rng)?;

    for j in 0..config.signature_layers {
        msa(&mut params, &format!("sig{j}.msa"), &mut rng)?;
        params.insert_uniform(&format!("sig{j}.mlp.w1"), [2 * d, b], 2 * d, &mut rng)?;
        params.insert_uniform(&format!("sig{j}.mlp.b1"), [1, b], 2 * d, &mut rng)?;
        params.insert_uniform(&format!("sig{j}.mlp.w2"), [b, d], b, &mut rng)?;
        params.insert_uniform(&format!("sig{j}.mlp.b2"), [1, d], b, &mut rng)?;
    }

    params.insert_uniform("head_mlp.w1", [d, b], d, &mut rng)?;
    params.insert_uniform("head_mlp.b1", [1, b], d, &mut rng)?;
    params.insert_uniform("head_mlp.w2", [b, d], b, &mut rng)?;
    params.insert_uniform("head_mlp.b2", [1, d], b, &mut rng)?;

    Ok(params)
}

fn attention_weights(bound: &BoundParams, prefix: &str) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: bound.var(&format!("{prefix}.wq"))?,
        bq: bound.var(&format!("{prefix}.bq"))?,
        wk: bound.var(&format!("{prefix}.wk"))?,
        bk: bound.var(&format!("{prefix}.bk"))?,
        wv: bound.var(&format!("{prefix}.wv"))?,
        bv: bound.var(&format!("{prefix}.bv"))?,
        wo: bound.var(&format!("{prefix}.wo"))?,
        bo: bound.var(&format!("{prefix}.bo"))?,
    })
}

fn mlp_weights(bound: &BoundParams, prefix: &str) -> Result<MlpWeights> {
    Ok(MlpWeights {
        w1: bound.var(&format!("{prefix}.w1"))?,
        b1: bound.var(&format!("{prefix}.b1"))?,
        w2: bound.var(&format!("{prefix}.w2"))?,
        b2: bound.var(&format!("{prefix}.b2"))?,
    })
}

/// One tokenized subline on the tape: embeddings with the `[LINE]` slot at
/// row zero, positional rows, and the key mask. Masked rows are zero.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub positional: Var,
    pub mask: Vec<bool>,
    pub n_actual: usize,
    pub subline: Subline,
    pub points: Vec<PointToken>,
}

/// Positional rows for a point sequence: each point contributes
/// `MLP((x/W, y/H, c))`, the `[LINE]` slot gets the MLP of the zero vector,
/// and masked rows are zeroed.
pub fn positional_embedding(
    tape: &mut Tape,
    bound: &BoundParams,
    points: &[PointToken],
    config: &ModelConfig,
) -> Result<Var> {
    let rows = config.n_max + 1;
    let mut inputs = vec![0.0; rows * 3];
    for (i, p) in points.iter().enumerate() {
        inputs[(i + 1) * 3] = p.x / config.image_width as f64;
        inputs[(i + 1) * 3 + 1] = p.y / config.image_height as f64;
        inputs[(i + 1) * 3 + 2] = p.c;
    }
    let inputs = tape.constant_from([rows, 3], inputs)?;
    let pos = mlp(tape, inputs, &mlp_weights(bound, "pos_mlp")?)?;

    let mut row_mask = vec![0.0; rows * config.d];
    for r in 0..=points.len() {
        row_mask[r * config.d..(r + 1) * config.d].fill(1.0);
    }
    let row_mask = tape.constant_from([rows, config.d], row_mask)?;
    Ok(tape.mul(pos, row_mask)?)
}

/// Tokenizes a subline: samples points at interval `v`, reads their
/// embeddings from the descriptor map, and pads the sequence to
/// `n_max + 1` slots with the mask marking the padding.
pub fn tokenize_line(
    tape: &mut Tape,
    bound: &BoundParams,
    subline: &Subline,
    map: &DescriptorMap,
    confidence: &ConfidenceModel,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    if map.dim() != config.d {
        return Err(ModelError::DimensionMismatch {
            map: map.dim(),
            model: config.d,
        });
    }
    let line_id = subline.parent_keyline_id;
    let points = sample_points(&subline.segment, config.v, &|i, _, _| {
        confidence.confidence(line_id, i)
    })?;
    let n = points.len();
    if n < config.n_min || n > config.n_max {
        return Err(ModelError::TokenCount {
            id: subline.segment.id,
            n,
            n_min: config.n_min,
            n_max: config.n_max,
        });
    }

    let mut point_rows = vec![0.0; config.n_max * config.d];
    for (i, p) in points.iter().enumerate() {
        let emb = map.lookup(p.x, p.y)?;
        point_rows[i * config.d..(i + 1) * config.d].copy_from_slice(&emb);
    }
    let point_rows = tape.constant_from([config.n_max, config.d], point_rows)?;
    let e_line = bound.var("e_line")?;
    let embeddings = tape.concat_rows(&[e_line, point_rows])?;

    let positional = positional_embedding(tape, bound, &points, config)?;

    let mut mask = vec![true; config.n_max + 1];
    for m in mask.iter_mut().take(n + 1) {
        *m = false;
    }

    Ok(TokenSequence {
        embeddings,
        positional,
        mask,
        n_actual: n,
        subline: *subline,
        points,
    })
}

/// Transformer output for one subline.
#[derive(Debug, Clone)]
pub struct SublineDescriptor {
    /// Unit descriptor row `[1, D]` on the tape.
    pub descriptor: Var,
    /// Attention probabilities per layer and head, `[n_max+1, n_max+1]`.
    pub attention: Vec<Vec<Var>>,
}

/// Runs the masked transformer over tokenized sublines. Each block applies
/// post-norm residual attention and a post-norm residual MLP; the descriptor
/// is the normalized `[LINE]`-slot row of the final layer.
pub fn transformer_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[TokenSequence],
    config: &ModelConfig,
) -> Result<Vec<SublineDescriptor>> {
    if batch.is_empty() {
        return Err(ModelError::NoValidLines);
    }
    let mut out = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut z = tape.add(seq.embeddings, seq.positional)?;
        let mut attention = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let msa = attention_weights(bound, &format!("enc{i}.msa"))?;
            let (attended, probs) = multi_head_attention(tape, z, &msa, &seq.mask, config.heads)?;
            let residual = tape.add(attended, z)?;
            let g1 = bound.var(&format!("enc{i}.ln1.gamma"))?;
            let b1 = bound.var(&format!("enc{i}.ln1.beta"))?;
            let z1 = tape.layer_norm(residual, g1, b1, LN_EPS)?;

            let fed = mlp(tape, z1, &mlp_weights(bound, &format!("enc{i}.mlp"))?)?;
            let residual = tape.add(fed, z1)?;
            let g2 = bound.var(&format!("enc{i}.ln2.gamma"))?;
            let b2 = bound.var(&format!("enc{i}.ln2.beta"))?;
            z = tape.layer_norm(residual, g2, b2, LN_EPS)?;
            attention.push(probs);
        }
        let slot0 = tape.slice_rows(z, 0, 1)?;
        let descriptor = tape.l2_normalize_rows(slot0)?;
        out.push(SublineDescriptor {
            descriptor,
            attention,
        });
    }
    Ok(out)
}

/// Message passing across the lines of one image: attribute embeddings are
/// added to the descriptors, then each layer updates
/// `s <- s + MLP(s || MSA(s))` with full self-attention, and a final MLP
/// plus normalization produces the enhanced descriptors.
pub fn line_signature_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    descriptors: &[Var],
    attributes: &DMatrix<f64>,
    config: &ModelConfig,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let m = descriptors.len();
    if m == 0 {
        return Err(ModelError::NoValidLines);
    }
    debug_assert_eq!(attributes.nrows(), m);
    debug_assert_eq!(attributes.ncols(), 5);

    let attr_values: Vec<f64> = (0..m)
        .flat_map(|i| (0..5).map(move |j| attributes[(i, j)]))
        .collect();
    let attr = tape.constant_from([m, 5], attr_values)?;
    let attr_emb = mlp(tape, attr, &mlp_weights(bound, "attr_mlp")?)?;

    let stacked = tape.concat_rows(descriptors)?;
    let mut s = tape.add(stacked, attr_emb)?;

    let mask = vec![false; m];
    let mut attention = Vec::with_capacity(config.signature_layers);
    for j in 0..config.signature_layers {
        let msa = attention_weights(bound, &format!("sig{j}.msa"))?;
        let (attended, probs) = multi_head_attention(tape, s, &msa, &mask, config.heads)?;
        let cat = tape.concat_cols(&[s, attended])?;
        let update = mlp(tape, cat, &mlp_weights(bound, &format!("sig{j}.mlp"))?)?;
        s = tape.add(s, update)?;
        attention.push(probs);
    }

    let projected = mlp(tape, s, &mlp_weights(bound, "head_mlp")?)?;
    let out = tape.l2_normalize_rows(projected)?;
    Ok((out, attention))
}

/// Full forward pass for one image, still on the tape (used directly by
/// training, realized by [`describe_image`]).
pub struct ImageForward {
    /// Enhanced subline descriptors `[m, D]`, unit rows.
    pub descriptors: Var,
    pub sublines: Vec<Subline>,
    /// Keylines that survived token-count filtering.
    pub keylines: Vec<LineSegment2D>,
    pub adjacency: AdjacencyMatrix,
    /// Per subline, per layer, per head.
    pub transformer_attention: Vec<Vec<Vec<Var>>>,
    /// Per layer, per head, `[m, m]`.
    pub signature_attention: Vec<Vec<Var>>,
    /// Token count per subline (for attention readout).
    pub token_counts: Vec<usize>,
}

pub fn describe_image_on(
    tape: &mut Tape,
    bound: &BoundParams,
    lines: &[LineSegment2D],
    map: &DescriptorMap,
    confidence: &ConfidenceModel,
    config: &ModelConfig,
) -> Result<ImageForward> {
    config.validate()?;
    let mut keylines = Vec::new();
    let mut sublines = Vec::new();
    for line in lines {
        let n = crate::geometry::point_count(line.length(), config.v);
        if n < config.n_min {
            continue;
        }
        keylines.push(*line);
        sublines.extend(split_into_sublines(line, config.v, config.n_max));
    }
    if sublines.is_empty() {
        return Err(ModelError::NoValidLines);
    }

    let sequences: Vec<TokenSequence> = sublines
        .iter()
        .map(|s| tokenize_line(tape, bound, s, map, confidence, config))
        .collect::<Result<_>>()?;
    let transformed = transformer_forward(tape, bound, &sequences, config)?;

    let diag = config.image_diagonal();
    let attributes = DMatrix::from_fn(sublines.len(), 5, |i, j| {
        let a = sublines[i].segment.attributes();
        match j {
            0 => a.mid_x / config.image_width as f64,
            1 => a.mid_y / config.image_height as f64,
            2 => a.length / diag,
            3 => a.cos_theta,
            _ => a.sin_theta,
        }
    });
    let descriptor_vars: Vec<Var> = transformed.iter().map(|t| t.descriptor).collect();
    let (enhanced, signature_attention) =
        line_signature_forward(tape, bound, &descriptor_vars, &attributes, config)?;

    let adjacency = build_adjacency(&keylines, &sublines)?;

    Ok(ImageForward {
        descriptors: enhanced,
        sublines,
        keylines,
        adjacency,
        transformer_attention: transformed.into_iter().map(|t| t.attention).collect(),
        signature_attention,
        token_counts: sequences.iter().map(|s| s.n_actual).collect(),
    })
}

/// Aggregates subline descriptors to keyline descriptors on the tape: the
/// row-stochastic adjacency averages each keyline's sublines, then rows are
/// renormalized. `[K, D]`, unit rows.
pub fn aggregate_keylines_on(tape: &mut Tape, forward: &ImageForward) -> Result<Var> {
    let adj = forward.adjacency.entries();
    let values: Vec<f64> = (0..adj.nrows())
        .flat_map(|r| (0..adj.ncols()).map(move |c| adj[(r, c)]))
        .collect();
    let adj_var = tape.constant_from([adj.nrows(), adj.ncols()], values)?;
    let mean = tape.matmul(adj_var, forward.descriptors)?;
    Ok(tape.l2_normalize_rows(mean)?)
}

/// Attention probabilities realized off the tape, for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecords {
    /// `[subline][layer][head]`: the `[LINE]`-slot row over the unmasked
    /// slots (length `n_actual + 1`).
    pub line_slot: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][head]`: row-major `m x m` line-to-line attention.
    pub signature: Vec<Vec<Vec<f64>>>,
    pub sublines: usize,
}

/// Per-image descriptor set: enhanced unit descriptors for every subline,
/// the keyline adjacency, and optional attention records.
#[derive(Debug, Clone)]
pub struct LineDescriptorSet {
    pub descriptors: DMatrix<f64>,
    pub sublines: Vec<Subline>,
    pub keylines: Vec<LineSegment2D>,
    pub adjacency: AdjacencyMatrix,
    pub attention: Option<AttentionRecords>,
}

impl LineDescriptorSet {
    pub fn keyline_ids(&self) -> Vec<u32> {
        self.keylines.iter().map(|k| k.id).collect()
    }
}

/// Runs the full forward pass on a fresh tape and realizes the results.
pub fn describe_image(
    lines: &[LineSegment2D],
    map: &DescriptorMap,
    params: &ParameterSet,
    confidence: &ConfidenceModel,
    config: &ModelConfig,
    record_attention: bool,
) -> Result<LineDescriptorSet> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let forward = describe_image_on(&mut tape, &bound, lines, map, confidence, config)?;

    let m = forward.sublines.len();
    let descriptors = DMatrix::from_fn(m, config.d, |i, j| {
        tape.values(forward.descriptors)[i * config.d + j]
    });

    let attention = record_attention.then(|| realize_attention(&tape, &forward));

    Ok(LineDescriptorSet {
        descriptors,
        sublines: forward.sublines,
        keylines: forward.keylines,
        adjacency: forward.adjacency,
        attention,
    })
}

pub fn realize_attention(tape: &Tape, forward: &ImageForward) -> AttentionRecords {
    let m = forward.sublines.len();
    let line_slot = forward
        .transformer_attention
        .iter()
        .enumerate()
        .map(|(s, layers)| {
            let visible = forward.token_counts[s] + 1;
            layers
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|&probs| {
                            let cols = tape.shape(probs)[1];
                            tape.values(probs)[..cols]
                                .iter()
                                .take(visible)
                                .copied()
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let signature = forward
        .signature_attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|&probs| tape.values(probs).to_vec())
                .collect()
        })
        .collect();
    AttentionRecords {
        line_slot,
        signature,
        sublines: m,
    }
}
