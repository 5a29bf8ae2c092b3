//! Line-segment data model: point sampling, keyline/subline decomposition,
//! homography projection, overlap similarity, and ground-truth
//! correspondence generation.
//!
//! All functions here are pure; coordinates are pixels with the origin at
//! the top-left of the image.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("line {id} is degenerate (length {length})")]
    DegenerateLine { id: u32, length: f64 },
    #[error("line {id} is too short to sample {needed} points at interval {interval}")]
    LineTooShort {
        id: u32,
        interval: f64,
        needed: usize,
    },
    #[error("sampling interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("homography is singular (|det| = {det})")]
    SingularHomography { det: f64 },
    #[error("projected point maps to infinity (w = {w})")]
    PointAtInfinity { w: f64 },
    #[error("subline references unknown keyline {parent}")]
    OrphanSubline { parent: u32 },
    #[error("keyline {id} has no sublines")]
    KeylineWithoutSublines { id: u32 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// 2-D line segment in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment2D {
    pub id: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Midpoint, length, and folded direction of a segment — the geometric
/// attributes shared through the line signature network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineAttributes {
    pub mid_x: f64,
    pub mid_y: f64,
    pub length: f64,
    pub cos_theta: f64,
    pub sin_theta: f64,
}

impl LineSegment2D {
    pub fn new(id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let line = Self { id, x1, y1, x2, y2 };
        let length = line.length();
        if length.is_nan() || length <= 0.0 {
            return Err(GeometryError::DegenerateLine { id, length });
        }
        Ok(line)
    }

    pub fn length(&self) -> f64 {
        ((self.x2 - self.x1).powi(2) + (self.y2 - self.y1).powi(2)).sqrt()
    }

    /// Unit direction from the start endpoint.
    pub fn direction(&self) -> (f64, f64) {
        let len = self.length();
        ((self.x2 - self.x1) / len, (self.y2 - self.y1) / len)
    }

    /// Point at arc length `t` (pixels) from the start endpoint.
    pub fn point_at(&self, t: f64) -> (f64, f64) {
        let (dx, dy) = self.direction();
        (self.x1 + t * dx, self.y1 + t * dy)
    }

    /// Direction angle folded to `[0, pi)`, so endpoint order is irrelevant.
    pub fn angle(&self) -> f64 {
        let mut theta = (self.y2 - self.y1).atan2(self.x2 - self.x1);
        if theta < 0.0 {
            theta += std::f64::consts::PI;
        }
        if theta >= std::f64::consts::PI {
            theta -= std::f64::consts::PI;
        }
        theta
    }

    pub fn attributes(&self) -> LineAttributes {
        let theta = self.angle();
        LineAttributes {
            mid_x: (self.x1 + self.x2) / 2.0,
            mid_y: (self.y1 + self.y2) / 2.0,
            length: self.length(),
            cos_theta: theta.cos(),
            sin_theta: theta.sin(),
        }
    }

    /// Homogeneous coefficients `(a, b, c)` of the infinite line through the
    /// segment, normalized so `a^2 + b^2 = 1`.
    pub fn infinite_line(&self) -> Vector3<f64> {
        let p1 = Vector3::new(self.x1, self.y1, 1.0);
        let p2 = Vector3::new(self.x2, self.y2, 1.0);
        let l = p1.cross(&p2);
        let norm = (l.x * l.x + l.y * l.y).sqrt();
        l / norm
    }

    /// Perpendicular distance from a point to the infinite line.
    pub fn distance_to_point(&self, x: f64, y: f64) -> f64 {
        let l = self.infinite_line();
        (l.x * x + l.y * y + l.z).abs()
    }

    pub fn within_bounds(&self, width: f64, height: f64) -> bool {
        let inside = |x: f64, y: f64| x >= 0.0 && x <= width && y >= 0.0 && y <= height;
        inside(self.x1, self.y1) && inside(self.x2, self.y2)
    }
}

/// A sampled point on a line segment: image coordinates plus a keypoint
/// confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointToken {
    pub x: f64,
    pub y: f64,
    pub c: f64,
}

/// One piece of a keyline after length-driven splitting. An unsplit keyline
/// is its own single subline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subline {
    pub segment: LineSegment2D,
    pub parent_keyline_id: u32,
    pub index_within_parent: usize,
    pub siblings_count: usize,
}

/// Row-stochastic keyline-to-subline weights: each keyline row holds `1/k`
/// on each of its `k` sublines.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    entries: DMatrix<f64>,
    keyline_ids: Vec<u32>,
}

impl AdjacencyMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn keyline_ids(&self) -> &[u32] {
        &self.keyline_ids
    }

    pub fn keylines(&self) -> usize {
        self.entries.nrows()
    }

    pub fn sublines(&self) -> usize {
        self.entries.ncols()
    }
}

/// Ground-truth correspondence strengths between two line sets; zero means
/// "not a correspondence".
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    entries: DMatrix<f64>,
    row_ids: Vec<u32>,
    col_ids: Vec<u32>,
}

impl OverlapMatrix {
    pub fn new(entries: DMatrix<f64>, row_ids: Vec<u32>, col_ids: Vec<u32>) -> Self {
        debug_assert_eq!(entries.nrows(), row_ids.len());
        debug_assert_eq!(entries.ncols(), col_ids.len());
        Self {
            entries,
            row_ids,
            col_ids,
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row_ids(&self) -> &[u32] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[u32] {
        &self.col_ids
    }

    pub fn row_index_of(&self, id: u32) -> Option<usize> {
        self.row_ids.iter().position(|&r| r == id)
    }

    pub fn col_index_of(&self, id: u32) -> Option<usize> {
        self.col_ids.iter().position(|&c| c == id)
    }

    /// Ground-truth strength for a pair of line ids, zero when either id is
    /// unknown.
    pub fn strength(&self, row_id: u32, col_id: u32) -> f64 {
        match (self.row_index_of(row_id), self.col_index_of(col_id)) {
            (Some(r), Some(c)) => self.entries[(r, c)],
            _ => 0.0,
        }
    }
}

/// 3x3 projective map with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let norm = m.norm();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(GeometryError::SingularHomography { det: 0.0 });
        }
        // Idempotent: re-normalizing an already-unit matrix must not move
        // its bits, or stored homographies would drift on every load.
        let normalized = if (norm - 1.0).abs() <= 1e-12 { m } else { m / norm };
        let det = normalized.determinant();
        if det.abs() <= 1e-12 {
            return Err(GeometryError::SingularHomography { det });
        }
        Ok(Self { m: normalized })
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or(GeometryError::SingularHomography {
                det: self.m.determinant(),
            })?;
        Self::new(inv)
    }

    /// Projects a point and dehomogenizes; fails near the plane at infinity.
    pub fn project_point(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let p = self.m * Vector3::new(x, y, 1.0);
        if p.z.abs() <= 1e-9 {
            return Err(GeometryError::PointAtInfinity { w: p.z });
        }
        Ok((p.x / p.z, p.y / p.z))
    }
}

/// Uniformly samples `floor(len/v) + 1` points along a segment starting at
/// its first endpoint; confidence comes from the supplied source.
///
/// The source is called with the sample index and pixel position.
pub fn sample_points(
    line: &LineSegment2D,
    v: f64,
    confidence: &dyn Fn(usize, f64, f64) -> f64,
) -> Result<Vec<PointToken>> {
    if v.is_nan() || v <= 0.0 {
        return Err(GeometryError::BadInterval(v));
    }
    let n = point_count(line.length(), v);
    if n < 2 {
        return Err(GeometryError::LineTooShort {
            id: line.id,
            interval: v,
            needed: 2,
        });
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = line.point_at(i as f64 * v);
        let c = confidence(i, x, y).clamp(0.0, 1.0);
        points.push(PointToken { x, y, c });
    }
    Ok(points)
}

/// Number of sample points a segment of length `len` yields at interval `v`.
pub fn point_count(len: f64, v: f64) -> usize {
    (len / v).floor() as usize + 1
}

/// Splits a keyline into equal-length contiguous sublines whenever its token
/// count exceeds `n_max`; otherwise returns the keyline as its own subline.
pub fn split_into_sublines(keyline: &LineSegment2D, v: f64, n_max: usize) -> Vec<Subline> {
    let n = point_count(keyline.length(), v);
    if n <= n_max {
        return vec![Subline {
            segment: *keyline,
            parent_keyline_id: keyline.id,
            index_within_parent: 0,
            siblings_count: 1,
        }];
    }
    let k = n.div_ceil(n_max);
    let length = keyline.length();
    let mut sublines = Vec::with_capacity(k);
    for i in 0..k {
        let t0 = length * i as f64 / k as f64;
        let t1 = length * (i + 1) as f64 / k as f64;
        let (x1, y1) = keyline.point_at(t0);
        let (x2, y2) = keyline.point_at(t1);
        sublines.push(Subline {
            segment: LineSegment2D {
                id: keyline.id,
                x1,
                y1,
                x2,
                y2,
            },
            parent_keyline_id: keyline.id,
            index_within_parent: i,
            siblings_count: k,
        });
    }
    sublines
}

/// Builds the keyline-by-subline adjacency matrix. Every subline must
/// reference a listed keyline and every keyline must own at least one
/// subline, so each row sums to exactly one.
pub fn build_adjacency(
    keylines: &[LineSegment2D],
    sublines: &[Subline],
) -> Result<AdjacencyMatrix> {
    let keyline_ids: Vec<u32> = keylines.iter().map(|k| k.id).collect();
    let mut entries = DMatrix::zeros(keylines.len(), sublines.len());
    for (col, sub) in sublines.iter().enumerate() {
        let row = keyline_ids
            .iter()
            .position(|&id| id == sub.parent_keyline_id)
            .ok_or(GeometryError::OrphanSubline {
                parent: sub.parent_keyline_id,
            })?;
        entries[(row, col)] = 1.0 / sub.siblings_count as f64;
    }
    for (row, &id) in keyline_ids.iter().enumerate() {
        if entries.row(row).iter().all(|&v| v == 0.0) {
            return Err(GeometryError::KeylineWithoutSublines { id });
        }
    }
    Ok(AdjacencyMatrix {
        entries,
        keyline_ids,
    })
}

/// Projects both endpoints through the homography.
pub fn project_line(h: &Homography, line: &LineSegment2D) -> Result<LineSegment2D> {
    let (x1, y1) = h.project_point(line.x1, line.y1)?;
    let (x2, y2) = h.project_point(line.x2, line.y2)?;
    Ok(LineSegment2D {
        id: line.id,
        x1,
        y1,
        x2,
        y2,
    })
}

/// Overlap similarity `|l1 n l2| / min(len1, len2)` measured along the
/// infinite line of `l1`: all four endpoints are projected onto it and the
/// 1-D interval intersection is taken.
pub fn overlap_similarity(l1: &LineSegment2D, l2: &LineSegment2D) -> f64 {
    let (dx, dy) = l1.direction();
    let project = |x: f64, y: f64| (x - l1.x1) * dx + (y - l1.y1) * dy;

    let a0 = project(l1.x1, l1.y1);
    let a1 = project(l1.x2, l1.y2);
    let b0 = project(l2.x1, l2.y1);
    let b1 = project(l2.x2, l2.y2);

    let (a_lo, a_hi) = (a0.min(a1), a0.max(a1));
    let (b_lo, b_hi) = (b0.min(b1), b0.max(b1));

    let overlap = a_hi.min(b_hi) - a_lo.max(b_lo);
    if overlap <= 0.0 {
        return 0.0;
    }
    (overlap / l1.length().min(l2.length())).clamp(0.0, 1.0)
}

/// Thresholds for accepting a projected-line pair as a true correspondence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GtCriteria {
    pub max_reprojection_px: f64,
    pub max_angle_deg: f64,
}

impl Default for GtCriteria {
    fn default() -> Self {
        Self {
            max_reprojection_px: 4.0,
            max_angle_deg: 2.0,
        }
    }
}

/// Acute difference of two folded line angles, in radians.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(std::f64::consts::PI - d)
}

/// Projects `lines1` into the second image and scores every pair: the entry
/// is the overlap similarity when the pair passes all three criteria
/// (overlap exists, mean endpoint reprojection below threshold, angle
/// difference below threshold) and zero otherwise.
pub fn gt_correspondences(
    lines1: &[LineSegment2D],
    lines2: &[LineSegment2D],
    h_gt: &Homography,
    criteria: &GtCriteria,
) -> OverlapMatrix {
    let max_angle = criteria.max_angle_deg.to_radians();
    let mut entries = DMatrix::zeros(lines1.len(), lines2.len());
    for (i, l1) in lines1.iter().enumerate() {
        let Ok(projected) = project_line(h_gt, l1) else {
            continue; // line crosses the plane at infinity: no correspondences
        };
        if !(projected.length().is_finite() && projected.length() > 0.0) {
            continue;
        }
        let angle1 = projected.angle();
        for (j, l2) in lines2.iter().enumerate() {
            if angle_difference(angle1, l2.angle()) >= max_angle {
                continue;
            }
            let reproj = (l2.distance_to_point(projected.x1, projected.y1)
                + l2.distance_to_point(projected.x2, projected.y2))
                / 2.0;
            if reproj >= criteria.max_reprojection_px {
                continue;
            }
            let overlap = overlap_similarity(&projected, l2);
            if overlap > 0.0 {
                entries[(i, j)] = overlap;
            }
        }
    }
    OverlapMatrix::new(
        entries,
        lines1.iter().map(|l| l.id).collect(),
        lines2.iter().map(|l| l.id).collect(),
    )
}

/// Reads a line set from a JSON array of `{id, x1, y1, x2, y2}` objects
/// (pixel coordinates, origin top-left). Degenerate segments are rejected.
pub fn load_line_set(path: &std::path::Path) -> std::io::Result<Vec<LineSegment2D>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<LineSegment2D> = serde_json::from_str(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    for l in &lines {
        if l.length().is_nan() || l.length() <= 0.0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {} is degenerate", l.id),
            ));
        }
    }
    Ok(lines)
}

pub fn save_line_set(path: &std::path::Path, lines: &[LineSegment2D]) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(lines)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    std::fs::write(path, json)
}

/// Clips a segment to the `[0, width] x [0, height]` rectangle
/// (Liang-Barsky). Returns `None` when nothing remains inside.
pub fn clip_to_bounds(line: &LineSegment2D, width: f64, height: f64) -> Option<LineSegment2D> {
    let dx = line.x2 - line.x1;
    let dy = line.y2 - line.y1;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-dx, line.x1),
        (dx, width - line.x1),
        (-dy, line.y1),
        (dy, height - line.y1),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 >= t1 {
        return None;
    }
    let clipped = LineSegment2D {
        id: line.id,
        x1: line.x1 + t0 * dx,
        y1: line.y1 + t0 * dy,
        x2: line.x1 + t1 * dx,
        y2: line.y1 + t1 * dy,
    };
    (clipped.length() > 0.0).then_some(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const UNIT_CONF: &dyn Fn(usize, f64, f64) -> f64 = &|_, _, _| 1.0;

    fn line(id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment2D {
        LineSegment2D::new(id, x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn sample_points_eighty_pixels_at_interval_eight() {
        let l = line(0, 0.0, 0.0, 80.0, 0.0);
        let pts = sample_points(&l, 8.0, UNIT_CONF).unwrap();
        assert_eq!(pts.len(), 11);
        assert_eq!((pts[0].x, pts[0].y), (0.0, 0.0));
        assert_eq!((pts[10].x, pts[10].y), (80.0, 0.0));
    }

    #[test]
    fn sample_points_exactly_one_interval_gives_endpoints() {
        let l = line(0, 2.0, 3.0, 10.0, 3.0);
        let pts = sample_points(&l, 8.0, UNIT_CONF).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[0].x, pts[0].y), (2.0, 3.0));
        assert_eq!((pts[1].x, pts[1].y), (10.0, 3.0));
    }

    #[test]
    fn sample_points_fractional_length_stops_short_of_endpoint() {
        let l = line(0, 0.0, 0.0, 83.5, 0.0);
        let pts = sample_points(&l, 8.0, UNIT_CONF).unwrap();
        assert_eq!(pts.len(), 11);
        let last = pts.last().unwrap();
        assert!((last.x - 80.0).abs() < 1e-12);
        assert!(
            (last.x - 83.5).abs() > 1.0,
            "last sample is not the endpoint"
        );
    }

    #[test]
    fn sample_points_too_short_is_error() {
        let l = line(3, 0.0, 0.0, 5.0, 0.0);
        assert!(matches!(
            sample_points(&l, 8.0, UNIT_CONF),
            Err(GeometryError::LineTooShort { id: 3, .. })
        ));
    }

    #[test]
    fn split_below_cap_returns_whole_keyline() {
        let l = line(0, 0.0, 0.0, 80.0, 0.0); // n = 11
        let subs = split_into_sublines(&l, 8.0, 21);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].segment, l);
        assert_eq!(subs[0].siblings_count, 1);
    }

    #[test]
    fn split_thirty_tokens_gives_two_equal_sublines() {
        // n = 30 at v = 8 requires length in [232, 240).
        let l = line(0, 0.0, 0.0, 236.0, 0.0);
        assert_eq!(point_count(l.length(), 8.0), 30);
        let subs = split_into_sublines(&l, 8.0, 21);
        assert_eq!(subs.len(), 2);
        assert!((subs[0].segment.length() - 118.0).abs() < 1e-9);
        assert!((subs[1].segment.length() - 118.0).abs() < 1e-9);
    }

    #[test]
    fn split_sixty_five_tokens_gives_four_sublines_with_bounded_tokens() {
        // n = 65 at v = 8 requires length in [512, 520).
        let l = line(0, 0.0, 0.0, 515.0, 0.0);
        assert_eq!(point_count(l.length(), 8.0), 65);
        let subs = split_into_sublines(&l, 8.0, 21);
        assert_eq!(subs.len(), 4);
        for sub in &subs {
            let n = point_count(sub.segment.length(), 8.0);
            assert!((15..=17).contains(&n), "subline token count {n}");
        }
    }

    #[test]
    fn sublines_chain_back_to_parent() {
        let l = line(0, 3.0, 4.0, 400.0, 310.0);
        let subs = split_into_sublines(&l, 8.0, 21);
        assert!(subs.len() > 1);
        assert!((subs[0].segment.x1 - l.x1).abs() < 1e-9);
        for w in subs.windows(2) {
            assert!((w[0].segment.x2 - w[1].segment.x1).abs() < 1e-9);
            assert!((w[0].segment.y2 - w[1].segment.y1).abs() < 1e-9);
        }
        let last = subs.last().unwrap();
        assert!((last.segment.x2 - l.x2).abs() < 1e-9);
        assert!((last.segment.y2 - l.y2).abs() < 1e-9);
    }

    #[test]
    fn adjacency_single_keyline_single_subline() {
        let k = line(0, 0.0, 0.0, 50.0, 0.0);
        let subs = split_into_sublines(&k, 8.0, 21);
        let adj = build_adjacency(&[k], &subs).unwrap();
        assert_eq!(adj.entries()[(0, 0)], 1.0);
    }

    #[test]
    fn adjacency_matches_figure_weights() {
        let a = line(0, 0.0, 0.0, 236.0, 0.0); // splits in two
        let b = line(1, 0.0, 10.0, 80.0, 10.0); // stays whole
        let mut subs = split_into_sublines(&a, 8.0, 21);
        subs.extend(split_into_sublines(&b, 8.0, 21));
        let adj = build_adjacency(&[a, b], &subs).unwrap();
        assert_eq!(adj.entries().nrows(), 2);
        assert_eq!(adj.entries().ncols(), 3);
        let expect = [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]];
        for (r, row) in expect.iter().enumerate() {
            for (c, want) in row.iter().enumerate() {
                assert_eq!(adj.entries()[(r, c)], *want);
            }
        }
    }

    #[test]
    fn adjacency_rows_sum_to_one_for_mixed_split_counts() {
        // Lengths chosen to split into 3, 1, and 2 sublines.
        let lines = [
            line(0, 0.0, 0.0, 400.0, 0.0),
            line(1, 0.0, 5.0, 100.0, 5.0),
            line(2, 0.0, 9.0, 236.0, 9.0),
        ];
        let mut subs = Vec::new();
        for l in &lines {
            subs.extend(split_into_sublines(l, 8.0, 21));
        }
        let counts: Vec<usize> = lines
            .iter()
            .map(|l| subs.iter().filter(|s| s.parent_keyline_id == l.id).count())
            .collect();
        assert_eq!(counts, vec![3, 1, 2]);
        let adj = build_adjacency(&lines, &subs).unwrap();
        for r in 0..3 {
            let sum: f64 = adj.entries().row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_rejects_orphan_subline() {
        let k = line(0, 0.0, 0.0, 50.0, 0.0);
        let mut subs = split_into_sublines(&k, 8.0, 21);
        subs[0].parent_keyline_id = 99;
        assert!(matches!(
            build_adjacency(&[k], &subs),
            Err(GeometryError::OrphanSubline { parent: 99 })
        ));
    }

    #[test]
    fn project_line_identity() {
        let l = line(0, 1.0, 2.0, 30.0, 40.0);
        let p = project_line(&Homography::identity(), &l).unwrap();
        assert!((p.x1 - 1.0).abs() < 1e-12);
        assert!((p.y2 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn project_line_translation() {
        let mut m = Matrix3::identity();
        m[(0, 2)] = 7.0;
        m[(1, 2)] = -3.0;
        let h = Homography::new(m).unwrap();
        let l = line(0, 1.0, 2.0, 30.0, 40.0);
        let p = project_line(&h, &l).unwrap();
        assert!((p.x1 - 8.0).abs() < 1e-9);
        assert!((p.y1 - (-1.0)).abs() < 1e-9);
        assert!((p.x2 - 37.0).abs() < 1e-9);
        assert!((p.y2 - 37.0).abs() < 1e-9);
    }

    #[test]
    fn project_line_matches_direct_matrix_arithmetic() {
        let m = Matrix3::new(1.1, 0.02, 5.0, -0.03, 0.97, -2.0, 1e-4, -2e-4, 1.0);
        let h = Homography::new(m).unwrap();
        let l = line(0, 10.0, 20.0, 200.0, 150.0);
        let p = project_line(&h, &l).unwrap();
        // Independent 3-vector multiplication with the unnormalized matrix.
        for ((x, y), (px, py)) in [((10.0, 20.0), (p.x1, p.y1)), ((200.0, 150.0), (p.x2, p.y2))] {
            let v = m * Vector3::new(x, y, 1.0);
            assert!((v.x / v.z - px).abs() < 1e-9);
            assert!((v.y / v.z - py).abs() < 1e-9);
        }
    }

    #[test]
    fn project_line_point_at_infinity_is_error() {
        // Bottom row sends x = 10 to w = 0.
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.1, 0.0, 1.0);
        let h = Homography::new(m).unwrap();
        let l = line(0, 10.0, 0.0, 20.0, 5.0);
        assert!(matches!(
            project_line(&h, &l),
            Err(GeometryError::PointAtInfinity { .. })
        ));
    }

    #[test]
    fn overlap_identical_lines_is_one() {
        let l = line(0, 3.0, 4.0, 60.0, 80.0);
        assert_eq!(overlap_similarity(&l, &l), 1.0);
    }

    #[test]
    fn overlap_disjoint_collinear_is_zero() {
        let a = line(0, 0.0, 0.0, 10.0, 0.0);
        let b = line(1, 20.0, 0.0, 30.0, 0.0);
        assert_eq!(overlap_similarity(&a, &b), 0.0);
    }

    #[test]
    fn overlap_half_covered() {
        let a = line(0, 0.0, 0.0, 100.0, 0.0);
        let b = line(1, 50.0, 0.0, 150.0, 0.0);
        assert!((overlap_similarity(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gt_identity_self_correspondence_has_unit_diagonal() {
        let lines = [
            line(0, 0.0, 0.0, 50.0, 0.0),
            line(1, 10.0, 10.0, 10.0, 60.0),
            line(2, 30.0, 5.0, 80.0, 55.0),
        ];
        let gt = gt_correspondences(
            &lines,
            &lines,
            &Homography::identity(),
            &GtCriteria::default(),
        );
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((gt.entries()[(i, j)] - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(gt.entries()[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn gt_perpendicular_pair_fails_angle_criterion() {
        let a = [line(0, 0.0, 0.0, 50.0, 0.0)];
        let b = [line(0, 25.0, -25.0, 25.0, 25.0)];
        let gt = gt_correspondences(&a, &b, &Homography::identity(), &GtCriteria::default());
        assert_eq!(gt.entries()[(0, 0)], 0.0);
    }

    #[test]
    fn gt_planted_pair_scores_its_overlap() {
        // Candidate shifted 3 px laterally, rotated 1 degree, 60% overlap:
        // passes 4 px and 2 degree thresholds, entry equals the overlap.
        let anchor = [line(0, 0.0, 0.0, 100.0, 0.0)];
        let theta = 1.0f64.to_radians();
        // Start 40 px along the anchor, extend 100 px at 1 degree, offset 3 px.
        let x0 = 40.0;
        let candidate = [line(
            0,
            x0,
            3.0,
            x0 + 100.0 * theta.cos(),
            3.0 + 100.0 * theta.sin(),
        )];
        let gt = gt_correspondences(
            &anchor,
            &candidate,
            &Homography::identity(),
            &GtCriteria::default(),
        );
        let entry = gt.entries()[(0, 0)];
        // Overlap along the anchor: from 40 to 100 of a 100-px line = 0.6.
        assert!((entry - 0.6).abs() < 0.01, "entry {entry}");
    }

    #[test]
    fn gt_reprojection_boundary_cases() {
        let crit = GtCriteria::default();
        let anchor = [line(0, 0.0, 0.0, 100.0, 0.0)];
        let just_inside = [line(0, 0.0, 3.9, 100.0, 3.9)];
        let just_outside = [line(0, 0.0, 4.1, 100.0, 4.1)];
        let h = Homography::identity();
        assert!(gt_correspondences(&anchor, &just_inside, &h, &crit).entries()[(0, 0)] > 0.0);
        assert_eq!(
            gt_correspondences(&anchor, &just_outside, &h, &crit).entries()[(0, 0)],
            0.0
        );
    }

    #[test]
    fn gt_angle_boundary_cases() {
        let crit = GtCriteria::default();
        let anchor = [line(0, 0.0, 0.0, 100.0, 0.0)];
        let spin = |deg: f64| {
            let t = deg.to_radians();
            // Rotate about the anchor midpoint so reprojection stays small.
            line(
                0,
                50.0 - 50.0 * t.cos(),
                -50.0 * t.sin(),
                50.0 + 50.0 * t.cos(),
                50.0 * t.sin(),
            )
        };
        let h = Homography::identity();
        assert!(
            gt_correspondences(&anchor, &[spin(1.9)], &h, &crit).entries()[(0, 0)] > 0.0,
            "1.9 degrees should pass"
        );
        assert_eq!(
            gt_correspondences(&anchor, &[spin(2.1)], &h, &crit).entries()[(0, 0)],
            0.0,
            "2.1 degrees should fail"
        );
    }

    #[test]
    fn line_attributes_horizontal() {
        let a = line(0, 0.0, 0.0, 10.0, 0.0).attributes();
        assert_eq!((a.mid_x, a.mid_y), (5.0, 0.0));
        assert_eq!(a.length, 10.0);
        assert!((a.cos_theta - 1.0).abs() < 1e-12);
        assert!(a.sin_theta.abs() < 1e-12);
    }

    #[test]
    fn line_attributes_vertical() {
        let a = line(0, 0.0, 0.0, 0.0, 8.0).attributes();
        assert!(a.cos_theta.abs() < 1e-12);
        assert!((a.sin_theta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_attributes_three_four_five() {
        let a = line(0, 1.0, 1.0, 4.0, 5.0).attributes();
        assert!((a.length - 5.0).abs() < 1e-12);
        assert_eq!((a.mid_x, a.mid_y), (2.5, 3.0));
    }

    #[test]
    fn angle_is_invariant_to_endpoint_order() {
        let a = line(0, 1.0, 2.0, 9.0, -3.0);
        let b = line(0, 9.0, -3.0, 1.0, 2.0);
        assert!((a.angle() - b.angle()).abs() < 1e-12);
    }

    #[test]
    fn projection_round_trip_restores_line() {
        let m = Matrix3::new(1.05, 0.1, 12.0, -0.08, 0.95, -6.0, 1e-4, 5e-5, 1.0);
        let h = Homography::new(m).unwrap();
        let inv = h.inverse().unwrap();
        let l = line(0, 15.0, 25.0, 230.0, 170.0);
        let back = project_line(&inv, &project_line(&h, &l).unwrap()).unwrap();
        assert!((back.x1 - l.x1).abs() < 1e-6);
        assert!((back.y1 - l.y1).abs() < 1e-6);
        assert!((back.x2 - l.x2).abs() < 1e-6);
        assert!((back.y2 - l.y2).abs() < 1e-6);
    }

    #[test]
    fn line_set_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lines.json");
        let lines = vec![line(0, 1.5, 2.25, 30.0, 40.0), line(7, 10.0, 10.0, 90.0, 15.0)];
        save_line_set(&path, &lines).unwrap();
        let loaded = load_line_set(&path).unwrap();
        assert_eq!(loaded, lines);

        std::fs::write(&path, r#"[{"id": 0, "x1": 1.0, "y1": 1.0, "x2": 1.0, "y2": 1.0}]"#)
            .unwrap();
        assert!(load_line_set(&path).is_err(), "degenerate line must be rejected");
    }

    #[test]
    fn clip_keeps_interior_segment() {
        let l = line(0, 10.0, 10.0, 50.0, 40.0);
        let c = clip_to_bounds(&l, 100.0, 100.0).unwrap();
        assert_eq!(c, l);
    }

    #[test]
    fn clip_trims_at_border_and_drops_outside() {
        let l = line(0, -10.0, 50.0, 50.0, 50.0);
        let c = clip_to_bounds(&l, 100.0, 100.0).unwrap();
        assert!((c.x1 - 0.0).abs() < 1e-9);
        assert!((c.x2 - 50.0).abs() < 1e-9);
        let outside = line(1, -30.0, -30.0, -5.0, -10.0);
        assert!(clip_to_bounds(&outside, 100.0, 100.0).is_none());
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric_for_collinear_segments(
            t0 in -50.0f64..50.0,
            len_a in 1.0f64..80.0,
            t1 in -50.0f64..50.0,
            len_b in 1.0f64..80.0,
            angle in 0.0f64..std::f64::consts::PI,
        ) {
            let (dx, dy) = (angle.cos(), angle.sin());
            let seg = |t: f64, len: f64, id| LineSegment2D {
                id,
                x1: 100.0 + t * dx,
                y1: 100.0 + t * dy,
                x2: 100.0 + (t + len) * dx,
                y2: 100.0 + (t + len) * dy,
            };
            let a = seg(t0, len_a, 0);
            let b = seg(t1, len_b, 1);
            prop_assert!((overlap_similarity(&a, &b) - overlap_similarity(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn overlap_is_invariant_to_endpoint_order(
            x1 in 0.0f64..100.0, y1 in 0.0f64..100.0,
            x2 in 101.0f64..200.0, y2 in 101.0f64..200.0,
            x3 in 0.0f64..100.0, y3 in 0.0f64..100.0,
            x4 in 101.0f64..200.0, y4 in 101.0f64..200.0,
        ) {
            let a = LineSegment2D { id: 0, x1, y1, x2, y2 };
            let a_rev = LineSegment2D { id: 0, x1: x2, y1: y2, x2: x1, y2: y1 };
            let b = LineSegment2D { id: 1, x1: x3, y1: y3, x2: x4, y2: y4 };
            let b_rev = LineSegment2D { id: 1, x1: x4, y1: y4, x2: x3, y2: y3 };
            let base = overlap_similarity(&a, &b);
            prop_assert!((overlap_similarity(&a_rev, &b) - base).abs() < 1e-12);
            prop_assert!((overlap_similarity(&a, &b_rev) - base).abs() < 1e-12);
            prop_assert!((overlap_similarity(&a_rev, &b_rev) - base).abs() < 1e-12);
        }
    }
}
