//! Procedural stand-in for a line detector + dense-descriptor front end:
//! line scenes, random homographies, warped descriptor-map pairs with
//! controllable noise, and ground-truth labels. Everything is a pure
//! function of its seeds, so any pair can be regenerated bit-exactly.

mod dataset;

pub use dataset::{load_dataset, save_dataset, DatasetHeader, DatasetReader};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    clip_to_bounds, gt_correspondences, project_line, GtCriteria, Homography, LineSegment2D,
};
use crate::model::{ConfidenceModel, DescriptorMap, ModelError};
use crate::training::TrainingPair;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("rejection budget exhausted after {0} tries (spec too aggressive)")]
    RejectionBudget(usize),
    #[error("every line was dropped or clipped away")]
    AllLinesLost,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: dataset is corrupt or truncated")]
    ChecksumMismatch,
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("pair index {index} out of range ({count} pairs)")]
    PairOutOfRange { index: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, SyntheticError>;

/// Layout of the generated line set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StructureMode {
    /// Independent random segments.
    Random,
    /// `rows` horizontal plus `cols` vertical lines, evenly spaced.
    Grid { rows: usize, cols: usize },
    /// Edges of random convex polygons.
    Polygons { sides: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub line_count: usize,
    pub length_min: f64,
    pub length_max: f64,
    pub structure: StructureMode,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            line_count: 10,
            length_min: 32.0,
            length_max: 220.0,
            structure: StructureMode::Random,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.line_count == 0 {
            return Err(SyntheticError::BadSpec("line_count must be >= 1".into()));
        }
        let diagonal = ((self.width as f64).powi(2) + (self.height as f64).powi(2)).sqrt();
        if self.length_min.is_nan() || self.length_min <= 0.0 || self.length_max < self.length_min {
            return Err(SyntheticError::BadSpec(format!(
                "length bounds [{}, {}] are invalid",
                self.length_min, self.length_max
            )));
        }
        if self.length_max > diagonal {
            return Err(SyntheticError::BadSpec(format!(
                "length_max {} exceeds the image diagonal {diagonal}",
                self.length_max
            )));
        }
        if let StructureMode::Grid { rows, cols } = self.structure {
            if rows == 0 && cols == 0 {
                return Err(SyntheticError::BadSpec("grid needs rows or cols".into()));
            }
        }
        Ok(())
    }
}

/// Bounds for random homography sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomographySpec {
    pub max_rotation_rad: f64,
    /// Per-axis scale is drawn from `[1 - s, 1 + s]`.
    pub max_scale_delta: f64,
    pub max_translation_px: f64,
    /// Bottom-row perspective coefficients are drawn from `[-p, +p]`.
    pub max_perspective: f64,
    pub seed: u64,
}

impl Default for HomographySpec {
    fn default() -> Self {
        Self {
            max_rotation_rad: 0.25,
            max_scale_delta: 0.15,
            max_translation_px: 24.0,
            max_perspective: 2e-4,
            seed: 0,
        }
    }
}

/// Perturbations applied when deriving the second view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Gaussian noise added per descriptor-map cell component.
    pub descriptor_sigma: f64,
    pub endpoint_jitter_px: f64,
    /// Probability a line disappears from the second view (occlusion).
    pub drop_probability: f64,
    /// Probability a surviving line is broken into two fragments.
    pub split_probability: f64,
    /// Sigma of the per-point confidence perturbation.
    pub confidence_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            descriptor_sigma: 0.0,
            endpoint_jitter_px: 0.0,
            drop_probability: 0.0,
            split_probability: 0.0,
            confidence_sigma: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.descriptor_sigma < 0.0
            || self.endpoint_jitter_px < 0.0
            || self.confidence_sigma < 0.0
        {
            return Err(SyntheticError::BadSpec("noise sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.drop_probability)
            || !(0.0..1.0).contains(&self.split_probability)
        {
            return Err(SyntheticError::BadSpec(
                "probabilities must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// A training pair plus the generation metadata it can be regenerated from.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub pair: TrainingPair,
    pub scene: SceneSpec,
    pub homography: HomographySpec,
    pub noise: NoiseConfig,
    pub seed: u64,
}

/// Seeded deterministic line set in the requested structure mode.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<LineSegment2D>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.width as f64;
    let h = spec.height as f64;
    let mut lines = Vec::new();
    let mut next_id = 0u32;

    match spec.structure {
        StructureMode::Random => {
            let mut tries = 0;
            while lines.len() < spec.line_count {
                tries += 1;
                if tries > 1000 * spec.line_count {
                    return Err(SyntheticError::RejectionBudget(tries));
                }
                let x1 = rng.gen_range(0.0..w);
                let y1 = rng.gen_range(0.0..h);
                let len = rng.gen_range(spec.length_min..=spec.length_max);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let x2 = x1 + len * angle.cos();
                let y2 = y1 + len * angle.sin();
                if (0.0..=w).contains(&x2) && (0.0..=h).contains(&y2) {
                    lines.push(LineSegment2D {
                        id: next_id,
                        x1,
                        y1,
                        x2,
                        y2,
                    });
                    next_id += 1;
                }
            }
        }
        StructureMode::Grid { rows, cols } => {
            let margin_x = 0.1 * w;
            let margin_y = 0.1 * h;
            for r in 0..rows {
                let y = margin_y + (h - 2.0 * margin_y) * (r as f64 + 0.5) / rows as f64;
                lines.push(LineSegment2D {
                    id: next_id,
                    x1: margin_x,
                    y1: y,
                    x2: w - margin_x,
                    y2: y,
                });
                next_id += 1;
            }
            for c in 0..cols {
                let x = margin_x + (w - 2.0 * margin_x) * (c as f64 + 0.5) / cols as f64;
                lines.push(LineSegment2D {
                    id: next_id,
                    x1: x,
                    y1: margin_y,
                    x2: x,
                    y2: h - margin_y,
                });
                next_id += 1;
            }
        }
        StructureMode::Polygons { sides } => {
            let sides = sides.clamp(3, 12);
            let mut tries = 0;
            'outer: while lines.len() < spec.line_count {
                tries += 1;
                if tries > 1000 {
                    return Err(SyntheticError::RejectionBudget(tries));
                }
                // Radius that makes a regular edge at least length_min.
                let edge_angle = std::f64::consts::PI / sides as f64;
                let r_min = spec.length_min / (2.0 * edge_angle.sin());
                let r_max = (spec.length_max / (2.0 * edge_angle.sin()))
                    .min(w.min(h) / 2.0 - 1.0)
                    .max(r_min);
                let radius = rng.gen_range(r_min..=r_max);
                let cx = rng.gen_range(radius..(w - radius).max(radius + 1e-9));
                let cy = rng.gen_range(radius..(h - radius).max(radius + 1e-9));
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let vertices: Vec<(f64, f64)> = (0..sides)
                    .map(|k| {
                        let a = phase + std::f64::consts::TAU * k as f64 / sides as f64;
                        (cx + radius * a.cos(), cy + radius * a.sin())
                    })
                    .collect();
                for k in 0..sides {
                    let (x1, y1) = vertices[k];
                    let (x2, y2) = vertices[(k + 1) % sides];
                    let len = ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt();
                    if len < spec.length_min || len > spec.length_max {
                        continue;
                    }
                    lines.push(LineSegment2D {
                        id: next_id,
                        x1,
                        y1,
                        x2,
                        y2,
                    });
                    next_id += 1;
                    if lines.len() == spec.line_count {
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(lines)
}

/// Samples a homography as translation * rotation * scale * perspective
/// composed about the image center, rejection-sampling until all four warped
/// corners stay within the doubled image box.
pub fn sample_homography(spec: &HomographySpec, width: u32, height: u32) -> Result<Homography> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = width as f64;
    let h = height as f64;
    let cx = w / 2.0;
    let cy = h / 2.0;

    for _ in 0..1000 {
        let angle = rng.gen_range(-spec.max_rotation_rad..=spec.max_rotation_rad);
        let sx = 1.0 + rng.gen_range(-spec.max_scale_delta..=spec.max_scale_delta);
        let sy = 1.0 + rng.gen_range(-spec.max_scale_delta..=spec.max_scale_delta);
        let tx = rng.gen_range(-spec.max_translation_px..=spec.max_translation_px);
        let ty = rng.gen_range(-spec.max_translation_px..=spec.max_translation_px);
        let px = rng.gen_range(-spec.max_perspective..=spec.max_perspective);
        let py = rng.gen_range(-spec.max_perspective..=spec.max_perspective);

        let recenter = nalgebra::Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let center = nalgebra::Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        let translation = nalgebra::Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0);
        let rotation = nalgebra::Matrix3::new(
            angle.cos(),
            -angle.sin(),
            0.0,
            angle.sin(),
            angle.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let scale = nalgebra::Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0);
        let perspective = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
        let m = translation * recenter * rotation * scale * perspective * center;

        let Ok(homography) = Homography::new(m) else {
            continue;
        };
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let ok = corners.iter().all(|&(x, y)| {
            homography
                .project_point(x, y)
                .map(|(px, py)| px >= -0.5 * w && px <= 1.5 * w && py >= -0.5 * h && py <= 1.5 * h)
                .unwrap_or(false)
        });
        if ok {
            return Ok(homography);
        }
    }
    Err(SyntheticError::RejectionBudget(1000))
}

/// Smoothed seeded random field, renormalized per cell: the `f64` field is
/// kept for warping, the `f32`-quantized [`DescriptorMap`] is what the rest
/// of the pipeline sees.
struct BaseField {
    grid_w: usize,
    grid_h: usize,
    dim: usize,
    /// Smoothed, un-normalized values.
    raw: Vec<f64>,
}

impl BaseField {
    fn generate(grid_w: usize, grid_h: usize, dim: usize, seed: u64, kernel_sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field: Vec<f64> = (0..grid_w * grid_h * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        // Separable Gaussian blur with clamped borders.
        let radius = (3.0 * kernel_sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * kernel_sigma * kernel_sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();

        let pass = |field: &Vec<f64>, horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; field.len()];
            for gy in 0..grid_h {
                for gx in 0..grid_w {
                    for d in 0..dim {
                        let mut acc = 0.0;
                        for (ki, kv) in kernel.iter().enumerate() {
                            let off = ki as isize - radius;
                            let (sx, sy) = if horizontal {
                                (
                                    ((gx as isize + off).clamp(0, grid_w as isize - 1)) as usize,
                                    gy,
                                )
                            } else {
                                (
                                    gx,
                                    ((gy as isize + off).clamp(0, grid_h as isize - 1)) as usize,
                                )
                            };
                            acc += kv * field[(sy * grid_w + sx) * dim + d];
                        }
                        out[(gy * grid_w + gx) * dim + d] = acc / ksum;
                    }
                }
            }
            out
        };
        field = pass(&field, true);
        field = pass(&field, false);
        Self {
            grid_w,
            grid_h,
            dim,
            raw: field,
        }
    }

    fn cell_raw(&self, gx: usize, gy: usize) -> &[f64] {
        let i = gy * self.grid_w + gx;
        &self.raw[i * self.dim..(i + 1) * self.dim]
    }

    /// Bilinear interpolation of the raw field in grid coordinates, clamped.
    fn interpolate(&self, gx: f64, gy: f64) -> Vec<f64> {
        let x0 = gx.floor();
        let y0 = gy.floor();
        let fx = gx - x0;
        let fy = gy - y0;
        let cx = |v: f64| (v.max(0.0) as usize).min(self.grid_w - 1);
        let cy = |v: f64| (v.max(0.0) as usize).min(self.grid_h - 1);
        let (ix0, ix1) = (cx(x0), cx(x0 + 1.0));
        let (iy0, iy1) = (cy(y0), cy(y0 + 1.0));
        let mut out = vec![0.0; self.dim];
        for (w, (jx, jy)) in [
            ((1.0 - fx) * (1.0 - fy), (ix0, iy0)),
            (fx * (1.0 - fy), (ix1, iy0)),
            ((1.0 - fx) * fy, (ix0, iy1)),
            (fx * fy, (ix1, iy1)),
        ] {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.cell_raw(jx, jy)) {
                *o += w * v;
            }
        }
        out
    }
}

fn normalize_to_map(
    width: u32,
    height: u32,
    stride: u32,
    dim: usize,
    cells: Vec<Vec<f64>>,
) -> Result<DescriptorMap> {
    let mut data = Vec::with_capacity(cells.len() * dim);
    for mut cell in cells {
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            // A vanishing smoothed cell is vanishingly unlikely; fall back to
            // a fixed axis vector to keep the map valid.
            cell = vec![0.0; dim];
            cell[0] = 1.0;
        } else {
            cell.iter_mut().for_each(|v| *v /= norm);
        }
        // Quantize to f32, then renormalize in f32 so stored cells are unit.
        let mut q: Vec<f32> = cell.iter().map(|&v| v as f32).collect();
        let qnorm = (q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
        q.iter_mut().for_each(|v| *v = ((*v as f64) / qnorm) as f32);
        data.extend(q);
    }
    Ok(DescriptorMap::new(width, height, stride, dim, data)?)
}

/// Width (in cells) of the smoothing kernel applied to the base field.
pub const FIELD_KERNEL_SIGMA: f64 = 2.0;

/// Generates a consistent descriptor-map pair: the base map is a smoothed
/// seeded random field; the second map samples that same field at
/// `H^-1`-warped cell centers and adds per-cell Gaussian noise, so
/// corresponding pixels carry near-identical descriptors at `sigma = 0`.
pub fn generate_descriptor_map_pair(
    seed: u64,
    h: &Homography,
    width: u32,
    height: u32,
    stride: u32,
    dim: usize,
    noise: &NoiseConfig,
) -> Result<(DescriptorMap, DescriptorMap)> {
    let grid_w = (width as usize).div_ceil(stride as usize);
    let grid_h = (height as usize).div_ceil(stride as usize);
    let base = BaseField::generate(grid_w, grid_h, dim, seed, FIELD_KERNEL_SIGMA);

    let cells1: Vec<Vec<f64>> = (0..grid_w * grid_h)
        .map(|i| base.cell_raw(i % grid_w, i / grid_w).to_vec())
        .collect();
    let map1 = normalize_to_map(width, height, stride, dim, cells1)?;

    let h_inv = h.inverse().map_err(ModelError::from)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE_D1CE_D1CE_D1CE);
    let mut cells2 = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let qx = (gx as f64 + 0.5) * stride as f64;
            let qy = (gy as f64 + 0.5) * stride as f64;
            let (px, py) = match h_inv.project_point(qx, qy) {
                Ok(p) => p,
                // A cell center at infinity cannot occur for sampled
                // homographies; fall back to the untransformed position.
                Err(_) => (qx, qy),
            };
            let mut cell = base.interpolate(px / stride as f64 - 0.5, py / stride as f64 - 0.5);
            if noise.descriptor_sigma > 0.0 {
                for v in cell.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += noise.descriptor_sigma * n;
                }
            }
            cells2.push(cell);
        }
    }
    let map2 = normalize_to_map(width, height, stride, dim, cells2)?;
    Ok((map1, map2))
}

/// Builds one training pair: the second view's lines are the projections of
/// the first view's, minus drops, plus fragmentation and endpoint jitter;
/// ground truth comes from the overlap criteria under the same homography.
pub fn make_pair(
    scene: &SceneSpec,
    homography: &HomographySpec,
    noise: &NoiseConfig,
    stride: u32,
    dim: usize,
    seed: u64,
) -> Result<SyntheticPair> {
    noise.validate()?;
    let lines1 = generate_scene(scene)?;
    let h = sample_homography(homography, scene.width, scene.height)?;
    let (map1, map2) =
        generate_descriptor_map_pair(seed, &h, scene.width, scene.height, stride, dim, noise)?;

    let w = scene.width as f64;
    let hh = scene.height as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED_5EED_5EED);
    let min_len = scene.length_min.min(2.0 * stride as f64);

    let mut lines2 = Vec::new();
    let mut next_id = 0u32;
    for line in &lines1 {
        if rng.gen::<f64>() < noise.drop_probability {
            continue;
        }
        let Ok(projected) = project_line(&h, line) else {
            continue;
        };
        let Some(clipped) = clip_to_bounds(&projected, w, hh) else {
            continue;
        };
        if clipped.length() < min_len {
            continue;
        }

        let mut fragments = Vec::new();
        if rng.gen::<f64>() < noise.split_probability && clipped.length() >= 2.0 * min_len {
            let t = rng.gen_range(0.35..0.65) * clipped.length();
            let (mx, my) = clipped.point_at(t);
            fragments.push(LineSegment2D {
                id: 0,
                x1: clipped.x1,
                y1: clipped.y1,
                x2: mx,
                y2: my,
            });
            fragments.push(LineSegment2D {
                id: 0,
                x1: mx,
                y1: my,
                x2: clipped.x2,
                y2: clipped.y2,
            });
        } else {
            fragments.push(clipped);
        }

        for mut frag in fragments {
            if noise.endpoint_jitter_px > 0.0 {
                let mut jitter = |v: f64, hi: f64| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (v + noise.endpoint_jitter_px * n).clamp(0.0, hi)
                };
                frag.x1 = jitter(frag.x1, w);
                frag.y1 = jitter(frag.y1, hh);
                frag.x2 = jitter(frag.x2, w);
                frag.y2 = jitter(frag.y2, hh);
            }
            if frag.length() < min_len {
                continue;
            }
            frag.id = next_id;
            next_id += 1;
            lines2.push(frag);
        }
    }
    if lines2.is_empty() {
        return Err(SyntheticError::AllLinesLost);
    }

    let gt = gt_correspondences(&lines1, &lines2, &h, &GtCriteria::default());
    let confidence = |tag: u64| {
        if noise.confidence_sigma > 0.0 {
            ConfidenceModel::Perturbed {
                seed: seed ^ tag,
                sigma: noise.confidence_sigma,
            }
        } else {
            ConfidenceModel::Constant(1.0)
        }
    };

    Ok(SyntheticPair {
        pair: TrainingPair {
            lines1,
            lines2,
            map1,
            map2,
            h_gt: h,
            gt,
            confidence1: confidence(0xA),
            confidence2: confidence(0xB),
        },
        scene: *scene,
        homography: *homography,
        noise: *noise,
        seed,
    })
}

/// Derives per-pair specs from base specs: each pair gets decorrelated
/// seeds, deterministically.
pub fn pair_specs(
    scene: &SceneSpec,
    homography: &HomographySpec,
    index: u64,
) -> (SceneSpec, HomographySpec, u64) {
    let mix = |seed: u64, salt: u64| {
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(salt)
            .rotate_left(17)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9)
    };
    let mut s = *scene;
    s.seed = mix(scene.seed, index.wrapping_mul(3) + 1);
    let mut h = *homography;
    h.seed = mix(homography.seed, index.wrapping_mul(3) + 2);
    (
        s,
        h,
        mix(scene.seed ^ homography.seed, index.wrapping_mul(3) + 3),
    )
}
