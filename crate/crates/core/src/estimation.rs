//! Line-correspondence homography estimation (DLT + RANSAC) and
//! corner-reprojection AUC metrics.
//!
//! Each line pair contributes two endpoint-on-line incidence constraints
//! `l2^T (H p) = 0`, one per endpoint of the first line. Hartley
//! normalization keeps the design matrix well conditioned; the solution is
//! the smallest right singular vector.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Homography, LineSegment2D};
use crate::matching::MatchSet;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("need at least 4 line pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate line configuration (rank below 8)")]
    Degenerate,
    #[error("no model reached 4 inliers")]
    NoConsensus,
    #[error("match references line id {0} missing from the line set")]
    UnknownLine(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        // Iteration count follows the evaluation protocol; the threshold
        // mirrors the 4 px ground-truth reprojection criterion.
        Self {
            iterations: 2000,
            inlier_threshold_px: 4.0,
            seed: 0,
        }
    }
}

/// RANSAC minimal sample size: four line pairs give the eight constraints a
/// homography needs.
pub const MIN_LINE_PAIRS: usize = 4;

#[derive(Debug, Clone)]
pub struct HomographyEstimate {
    pub h: Homography,
    /// (id1, id2) per inlier pair.
    pub inlier_ids: Vec<(u32, u32)>,
    pub mean_residual: f64,
}

/// Similarity transform moving a point cloud to centroid zero and mean
/// distance sqrt(2).
fn hartley_transform(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for &(x, y) in points {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mean_dist = points
        .iter()
        .map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let scale = if mean_dist > 1e-12 {
        2.0f64.sqrt() / mean_dist
    } else {
        1.0
    };
    Matrix3::new(
        scale,
        0.0,
        -scale * cx,
        0.0,
        scale,
        -scale * cy,
        0.0,
        0.0,
        1.0,
    )
}

/// Least-squares homography from line pairs: for every pair, both endpoints
/// of the first line must lie on the infinite line of the second after
/// mapping through `H`.
pub fn dlt_from_lines(pairs: &[(LineSegment2D, LineSegment2D)]) -> Result<Homography> {
    if pairs.len() < MIN_LINE_PAIRS {
        return Err(EstimationError::TooFewPairs(pairs.len()));
    }

    let src_points: Vec<(f64, f64)> = pairs
        .iter()
        .flat_map(|(l1, _)| [(l1.x1, l1.y1), (l1.x2, l1.y2)])
        .collect();
    let dst_points: Vec<(f64, f64)> = pairs
        .iter()
        .flat_map(|(_, l2)| [(l2.x1, l2.y1), (l2.x2, l2.y2)])
        .collect();
    let t1 = hartley_transform(&src_points);
    let t2 = hartley_transform(&dst_points);

    let rows = 2 * pairs.len();
    let mut a = DMatrix::zeros(rows.max(9), 9);
    for (idx, (l1, l2)) in pairs.iter().enumerate() {
        // Transform the target segment and take its line coefficients.
        let q1 = t2 * Vector3::new(l2.x1, l2.y1, 1.0);
        let q2 = t2 * Vector3::new(l2.x2, l2.y2, 1.0);
        let mut l = q1.cross(&q2);
        let ab = (l.x * l.x + l.y * l.y).sqrt();
        if ab <= 1e-15 {
            return Err(EstimationError::Degenerate);
        }
        l /= ab;
        for (e, (x, y)) in [(0, (l1.x1, l1.y1)), (1, (l1.x2, l1.y2))] {
            let p = t1 * Vector3::new(x, y, 1.0);
            let row = 2 * idx + e;
            for i in 0..3 {
                for j in 0..3 {
                    a[(row, 3 * i + j)] = l[i] * p[j];
                }
            }
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(EstimationError::Degenerate)?;
    // Smallest and second-smallest singular values decide the solution and
    // the rank check. nalgebra does not guarantee ordering, so sort indices.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap()
    });
    let smallest = order[0];
    let second = order[1];
    let largest = *order.last().unwrap();
    let sv_max = svd.singular_values[largest];
    if sv_max <= 0.0 || svd.singular_values[second] / sv_max < 1e-10 {
        return Err(EstimationError::Degenerate);
    }

    let h_vec = v_t.row(smallest);
    let h_norm = Matrix3::new(
        h_vec[0], h_vec[1], h_vec[2], h_vec[3], h_vec[4], h_vec[5], h_vec[6], h_vec[7], h_vec[8],
    );
    let t2_inv = t2.try_inverse().ok_or(EstimationError::Degenerate)?;
    let h = t2_inv * h_norm * t1;
    Homography::new(h).map_err(|_| EstimationError::Degenerate)
}

/// Mean perpendicular distance of `line1`'s projected endpoints to the
/// infinite line of `line2`, in pixels.
pub fn line_residual(h: &Homography, line1: &LineSegment2D, line2: &LineSegment2D) -> Result<f64> {
    let projected = crate::geometry::project_line(h, line1)?;
    let d1 = line2.distance_to_point(projected.x1, projected.y1);
    let d2 = line2.distance_to_point(projected.x2, projected.y2);
    Ok((d1 + d2) / 2.0)
}

/// Seeded RANSAC over matched line pairs: sample four pairs, solve the DLT,
/// count inliers by [`line_residual`], keep the best consensus, and refit on
/// all inliers. Per-iteration RNG streams make the result independent of
/// execution order.
pub fn ransac_homography(
    matches: &MatchSet,
    lines1: &[LineSegment2D],
    lines2: &[LineSegment2D],
    config: &RansacConfig,
) -> Result<HomographyEstimate> {
    let find = |set: &[LineSegment2D], id: u32| {
        set.iter()
            .find(|l| l.id == id)
            .copied()
            .ok_or(EstimationError::UnknownLine(id))
    };
    let mut pairs = Vec::with_capacity(matches.matches.len());
    for m in &matches.matches {
        pairs.push((find(lines1, m.id1)?, find(lines2, m.id2)?));
    }
    if pairs.len() < MIN_LINE_PAIRS {
        return Err(EstimationError::TooFewPairs(pairs.len()));
    }

    let residuals = |h: &Homography| -> Vec<Option<f64>> {
        pairs
            .iter()
            .map(|(l1, l2)| line_residual(h, l1, l2).ok())
            .collect()
    };
    let score = |res: &[Option<f64>]| -> (usize, f64) {
        let mut count = 0;
        let mut sum = 0.0;
        for r in res.iter().flatten() {
            if *r < config.inlier_threshold_px {
                count += 1;
                sum += r;
            }
        }
        (
            count,
            if count > 0 {
                sum / count as f64
            } else {
                f64::INFINITY
            },
        )
    };

    let mut best: Option<(usize, f64, Homography)> = None;
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    for iteration in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config
                .seed
                .wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        indices.shuffle(&mut rng);
        let sample: Vec<(LineSegment2D, LineSegment2D)> = indices[..MIN_LINE_PAIRS]
            .iter()
            .map(|&i| pairs[i])
            .collect();
        let Ok(h) = dlt_from_lines(&sample) else {
            continue;
        };
        let (count, mean) = score(&residuals(&h));
        if count < MIN_LINE_PAIRS {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bc, bm, _)) => count > *bc || (count == *bc && mean < *bm),
        };
        if better {
            best = Some((count, mean, h));
        }
    }

    let (_, _, model) = best.ok_or(EstimationError::NoConsensus)?;

    // Refit on the consensus set, keeping the sample model if the refit
    // degenerates or loses inliers.
    let res = residuals(&model);
    let consensus: Vec<(LineSegment2D, LineSegment2D)> = pairs
        .iter()
        .zip(&res)
        .filter(|(_, r)| matches!(r, Some(v) if *v < config.inlier_threshold_px))
        .map(|(p, _)| *p)
        .collect();
    let (mut final_h, mut final_score) = (model, score(&res));
    if consensus.len() >= MIN_LINE_PAIRS {
        if let Ok(refit) = dlt_from_lines(&consensus) {
            let refit_score = score(&residuals(&refit));
            if refit_score.0 >= final_score.0 {
                final_h = refit;
                final_score = refit_score;
            }
        }
    }

    let res = residuals(&final_h);
    let inlier_ids = matches
        .matches
        .iter()
        .zip(&res)
        .filter(|(_, r)| matches!(r, Some(v) if *v < config.inlier_threshold_px))
        .map(|(m, _)| (m.id1, m.id2))
        .collect();
    Ok(HomographyEstimate {
        h: final_h,
        inlier_ids,
        mean_residual: final_score.1,
    })
}

/// Mean reprojection distance of the four image corners between two
/// homographies.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, width: f64, height: f64) -> Result<f64> {
    let corners = [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)];
    let mut total = 0.0;
    for (x, y) in corners {
        let (ex, ey) = h_est.project_point(x, y)?;
        let (gx, gy) = h_gt.project_point(x, y)?;
        total += ((ex - gx).powi(2) + (ey - gy).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}

/// Area under the cumulative error curve at each threshold, computed as the
/// exact integral of the empirical CDF: `AUC(t) = (1/t) * integral_0^t F(e) de`.
/// Failures should be encoded as `+inf` so they count against the curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AucReport {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
}

pub const DEFAULT_AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

pub fn auc(errors: &[f64], thresholds: &[f64]) -> AucReport {
    let mut sorted: Vec<f64> = errors
        .iter()
        .map(|&e| if e.is_nan() { f64::INFINITY } else { e })
        .collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;

    let values = thresholds
        .iter()
        .map(|&t| {
            if sorted.is_empty() || t <= 0.0 {
                return 0.0;
            }
            let mut integral = 0.0;
            let mut prev = 0.0;
            let mut cdf = 0.0;
            for (i, &e) in sorted.iter().enumerate() {
                if e > t {
                    break;
                }
                integral += cdf * (e - prev);
                prev = e;
                cdf = (i + 1) as f64 / n;
            }
            integral += cdf * (t - prev);
            integral / t
        })
        .collect();
    AucReport {
        thresholds: thresholds.to_vec(),
        values,
        errors: errors.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_line;
    use crate::matching::{Match, MatchPolicy};
    use rand::Rng;

    fn line(id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment2D {
        LineSegment2D::new(id, x1, y1, x2, y2).unwrap()
    }

    fn sample_lines(n: usize, rng: &mut ChaCha8Rng) -> Vec<LineSegment2D> {
        (0..n)
            .map(|i| loop {
                let x1 = rng.gen_range(20.0..600.0);
                let y1 = rng.gen_range(20.0..440.0);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let len = rng.gen_range(60.0..200.0);
                let x2 = x1 + len * angle.cos();
                let y2 = y1 + len * angle.sin();
                if (0.0..640.0).contains(&x2) && (0.0..480.0).contains(&y2) {
                    return line(i as u32, x1, y1, x2, y2);
                }
            })
            .collect()
    }

    fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
        let angle: f64 = rng.gen_range(-0.2..0.2);
        let s: f64 = rng.gen_range(0.9..1.1);
        let tx: f64 = rng.gen_range(-30.0..30.0);
        let ty: f64 = rng.gen_range(-30.0..30.0);
        let px: f64 = rng.gen_range(-1e-4..1e-4);
        let py: f64 = rng.gen_range(-1e-4..1e-4);
        let m = Matrix3::new(
            s * angle.cos(),
            -s * angle.sin(),
            tx,
            s * angle.sin(),
            s * angle.cos(),
            ty,
            px,
            py,
            1.0,
        );
        Homography::new(m).unwrap()
    }

    fn exact_pairs(lines: &[LineSegment2D], h: &Homography) -> Vec<(LineSegment2D, LineSegment2D)> {
        lines
            .iter()
            .map(|l| (*l, project_line(h, l).unwrap()))
            .collect()
    }

    #[test]
    fn dlt_identity_from_exact_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lines = sample_lines(4, &mut rng);
        let pairs = exact_pairs(&lines, &Homography::identity());
        let h = dlt_from_lines(&pairs).unwrap();
        let m = h.matrix() / h.matrix()[(2, 2)];
        let err = (m - Matrix3::identity()).norm();
        assert!(err < 1e-8, "distance from identity: {err}");
    }

    #[test]
    fn dlt_recovers_pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lines = sample_lines(5, &mut rng);
        let mut t = Matrix3::identity();
        t[(0, 2)] = 12.0;
        t[(1, 2)] = -7.0;
        let h_gt = Homography::new(t).unwrap();
        let pairs = exact_pairs(&lines, &h_gt);
        let h = dlt_from_lines(&pairs).unwrap();
        let err = corner_error(&h, &h_gt, 640.0, 480.0).unwrap();
        assert!(err < 1e-8, "corner error {err}");
    }

    #[test]
    fn dlt_six_exact_pairs_under_random_perspective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let lines = sample_lines(6, &mut rng);
            let h_gt = random_homography(&mut rng);
            let pairs = exact_pairs(&lines, &h_gt);
            let h = dlt_from_lines(&pairs).unwrap();
            let err = corner_error(&h, &h_gt, 640.0, 480.0).unwrap();
            assert!(err < 1e-6, "corner error {err}");
        }
    }

    #[test]
    fn dlt_rejects_too_few_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lines = sample_lines(3, &mut rng);
        let pairs = exact_pairs(&lines, &Homography::identity());
        assert!(matches!(
            dlt_from_lines(&pairs),
            Err(EstimationError::TooFewPairs(3))
        ));
    }

    #[test]
    fn dlt_rejects_degenerate_configuration() {
        // Four copies of the same correspondence cannot fix a homography.
        let l = line(0, 10.0, 10.0, 100.0, 30.0);
        let pairs = vec![(l, l); 4];
        assert!(matches!(
            dlt_from_lines(&pairs),
            Err(EstimationError::Degenerate)
        ));
    }

    #[test]
    fn dlt_is_invariant_to_uniform_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lines = sample_lines(6, &mut rng);
        let h_gt = random_homography(&mut rng);
        let pairs = exact_pairs(&lines, &h_gt);
        let scale = 10.0;
        let scaled: Vec<(LineSegment2D, LineSegment2D)> = pairs
            .iter()
            .map(|(a, b)| {
                let s = |l: &LineSegment2D| LineSegment2D {
                    id: l.id,
                    x1: l.x1 * scale,
                    y1: l.y1 * scale,
                    x2: l.x2 * scale,
                    y2: l.y2 * scale,
                };
                (s(a), s(b))
            })
            .collect();
        let h_scaled = dlt_from_lines(&scaled).unwrap();
        // Conjugate the ground truth by the scaling and compare corners in
        // the scaled frame.
        let sm = Matrix3::new(scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 1.0);
        let h_gt_scaled = Homography::new(sm * h_gt.matrix() * sm.try_inverse().unwrap()).unwrap();
        let err = corner_error(&h_scaled, &h_gt_scaled, 6400.0, 4800.0).unwrap();
        assert!(err < 1e-6, "corner error {err}");
    }

    #[test]
    fn residual_zero_for_exact_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = sample_lines(1, &mut rng)[0];
        let h = random_homography(&mut rng);
        let projected = project_line(&h, &l).unwrap();
        assert!(line_residual(&h, &l, &projected).unwrap() < 1e-9);
    }

    #[test]
    fn residual_equals_lateral_offset() {
        let l1 = line(0, 0.0, 0.0, 100.0, 0.0);
        let l2 = line(0, 0.0, 3.0, 100.0, 3.0);
        let r = line_residual(&Homography::identity(), &l1, &l2).unwrap();
        assert!((r - 3.0).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_hand_point_to_line_formula() {
        let l1 = line(0, 10.0, 5.0, 40.0, 25.0);
        let l2 = line(0, 0.0, 0.0, 100.0, 50.0); // y = x/2: x - 2y = 0
        let r = line_residual(&Homography::identity(), &l1, &l2).unwrap();
        let dist = |x: f64, y: f64| (x - 2.0 * y).abs() / 5.0f64.sqrt();
        let expect = (dist(10.0, 5.0) + dist(40.0, 25.0)) / 2.0;
        assert!((r - expect).abs() < 1e-12);
    }

    fn all_matches(n: usize) -> MatchSet {
        MatchSet {
            matches: (0..n as u32)
                .map(|i| Match {
                    id1: i,
                    id2: i,
                    distance: 0.0,
                })
                .collect(),
            policy: MatchPolicy::default(),
        }
    }

    #[test]
    fn ransac_all_inliers_recovers_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lines1 = sample_lines(10, &mut rng);
        let h_gt = random_homography(&mut rng);
        let lines2: Vec<LineSegment2D> = lines1
            .iter()
            .map(|l| project_line(&h_gt, l).unwrap())
            .collect();
        let est = ransac_homography(
            &all_matches(10),
            &lines1,
            &lines2,
            &RansacConfig {
                iterations: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(est.inlier_ids.len(), 10);
        assert!(est.mean_residual < 1e-6);
        assert!(corner_error(&est.h, &h_gt, 640.0, 480.0).unwrap() < 1e-6);
    }

    #[test]
    fn ransac_sixty_percent_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lines1 = sample_lines(20, &mut rng);
        let h_gt = random_homography(&mut rng);
        let mut lines2: Vec<LineSegment2D> = lines1
            .iter()
            .map(|l| project_line(&h_gt, l).unwrap())
            .collect();
        // Corrupt 40% of the correspondences.
        for l in lines2.iter_mut().take(8) {
            l.x1 += rng.gen_range(30.0..80.0);
            l.y2 -= rng.gen_range(30.0..80.0);
        }
        let est = ransac_homography(
            &all_matches(20),
            &lines1,
            &lines2,
            &RansacConfig {
                iterations: 2000,
                inlier_threshold_px: 4.0,
                seed: 3,
            },
        )
        .unwrap();
        let err = corner_error(&est.h, &h_gt, 640.0, 480.0).unwrap();
        assert!(err < 1.0, "corner error {err}");
    }

    #[test]
    fn ransac_too_few_matches_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lines = sample_lines(3, &mut rng);
        let res = ransac_homography(&all_matches(3), &lines, &lines, &RansacConfig::default());
        assert!(matches!(res, Err(EstimationError::TooFewPairs(3))));
    }

    #[test]
    fn ransac_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let lines1 = sample_lines(12, &mut rng);
        let h_gt = random_homography(&mut rng);
        let mut lines2: Vec<LineSegment2D> = lines1
            .iter()
            .map(|l| project_line(&h_gt, l).unwrap())
            .collect();
        for l in lines2.iter_mut().take(4) {
            l.x1 += 50.0;
        }
        let cfg = RansacConfig {
            iterations: 200,
            inlier_threshold_px: 4.0,
            seed: 11,
        };
        let a = ransac_homography(&all_matches(12), &lines1, &lines2, &cfg).unwrap();
        let b = ransac_homography(&all_matches(12), &lines1, &lines2, &cfg).unwrap();
        assert_eq!(a.h.matrix(), b.h.matrix());
        assert_eq!(a.inlier_ids, b.inlier_ids);
    }

    #[test]
    fn corner_error_identical_homographies_is_zero() {
        let h = Homography::identity();
        assert_eq!(corner_error(&h, &h, 640.0, 480.0).unwrap(), 0.0);
    }

    #[test]
    fn corner_error_of_two_pixel_shift_is_two() {
        let mut m = Matrix3::identity();
        m[(0, 2)] = 2.0;
        let shifted = Homography::new(m).unwrap();
        let err = corner_error(&shifted, &Homography::identity(), 640.0, 480.0).unwrap();
        assert!((err - 2.0).abs() < 1e-12);
    }

    #[test]
    fn corner_error_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_homography(&mut rng);
        let b = random_homography(&mut rng);
        let err = corner_error(&a, &b, 640.0, 480.0).unwrap();
        let mut expect = 0.0;
        for (x, y) in [(0.0, 0.0), (640.0, 0.0), (640.0, 480.0), (0.0, 480.0)] {
            let pa = a.matrix() * Vector3::new(x, y, 1.0);
            let pb = b.matrix() * Vector3::new(x, y, 1.0);
            let dx = pa.x / pa.z - pb.x / pb.z;
            let dy = pa.y / pa.z - pb.y / pb.z;
            expect += (dx * dx + dy * dy).sqrt();
        }
        expect /= 4.0;
        assert!((err - expect).abs() < 1e-12);
    }

    #[test]
    fn auc_all_zero_errors_is_one() {
        let report = auc(&[0.0, 0.0, 0.0], &DEFAULT_AUC_THRESHOLDS);
        for v in report.values {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn auc_all_errors_beyond_twenty_is_zero() {
        let report = auc(&[25.0, 100.0, f64::INFINITY], &DEFAULT_AUC_THRESHOLDS);
        for v in report.values {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn auc_piecewise_integral_hand_case() {
        // errors {0, 10} at t = 10: F = 0.5 on (0, 10), 1 at 10 → AUC = 0.5.
        let report = auc(&[0.0, 10.0], &[10.0]);
        assert!((report.values[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_is_monotone_in_threshold_and_order_invariant() {
        let errors = [3.0, 18.0, 0.5, 7.2, 11.0, f64::INFINITY, 2.2];
        let report = auc(&errors, &[1.0, 2.0, 5.0, 10.0, 20.0, 50.0]);
        for w in report.values.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        let mut shuffled = errors;
        shuffled.reverse();
        let report2 = auc(&shuffled, &[1.0, 2.0, 5.0, 10.0, 20.0, 50.0]);
        assert_eq!(report.values, report2.values);
    }
}
