//! Descriptor distances, subline-to-keyline aggregation, nearest-neighbor
//! matching, and precision/recall scoring.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AdjacencyMatrix, OverlapMatrix};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("adjacency/distance dimensions do not chain: {0}")]
    ChainMismatch(String),
    #[error("distance matrix is empty")]
    EmptyMatrix,
    #[error("line id {0} not present in the ground truth")]
    UnknownId(u32),
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// Pairwise distances plus the identity of each row/column (subline ordinals
/// or keyline ids, depending on the stage).
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    entries: DMatrix<f64>,
    row_ids: Vec<u32>,
    col_ids: Vec<u32>,
}

impl DistanceMatrix {
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
}

/// Euclidean distances between two unit-descriptor sets, computed through
/// `dist^2 = 2 - 2 <a, b>`.
pub fn subline_distances(desc1: &DMatrix<f64>, desc2: &DMatrix<f64>) -> Result<DistanceMatrix> {
    if desc1.ncols() != desc2.ncols() {
        return Err(MatchError::DimensionMismatch(desc1.ncols(), desc2.ncols()));
    }
    let m1 = desc1.nrows();
    let m2 = desc2.nrows();
    let mut entries = DMatrix::zeros(m1, m2);
    for i in 0..m1 {
        for j in 0..m2 {
            let dot: f64 = desc1
                .row(i)
                .iter()
                .zip(desc2.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            entries[(i, j)] = (2.0 - 2.0 * dot).max(0.0).sqrt();
        }
    }
    Ok(DistanceMatrix::new(
        entries,
        (0..m1 as u32).collect(),
        (0..m2 as u32).collect(),
    ))
}

/// Aggregates a subline distance matrix to keylines via
/// `A_img1 * C_sublines * A_img2^T`, which averages each keyline pair's
/// subline distances.
pub fn keyline_distances(
    adj1: &AdjacencyMatrix,
    c_sublines: &DistanceMatrix,
    adj2: &AdjacencyMatrix,
) -> Result<DistanceMatrix> {
    if adj1.sublines() != c_sublines.entries().nrows()
        || adj2.sublines() != c_sublines.entries().ncols()
    {
        return Err(MatchError::ChainMismatch(format!(
            "A1 {}x{} . C {}x{} . A2^T {}x{}",
            adj1.keylines(),
            adj1.sublines(),
            c_sublines.entries().nrows(),
            c_sublines.entries().ncols(),
            adj2.sublines(),
            adj2.keylines(),
        )));
    }
    let entries = adj1.entries() * c_sublines.entries() * adj2.entries().transpose();
    Ok(DistanceMatrix::new(
        entries,
        adj1.keyline_ids().to_vec(),
        adj2.keyline_ids().to_vec(),
    ))
}

/// How [`match_nearest`] resolves candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchPolicy {
    pub mutual: bool,
    pub max_distance: Option<f64>,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self {
            mutual: true,
            max_distance: None,
        }
    }
}

/// One predicted correspondence between keylines of the two images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub id1: u32,
    pub id2: u32,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub policy: MatchPolicy,
}

/// Row-wise nearest neighbor with deterministic tie-breaking by lower
/// column id; under the mutual policy a pair survives only when it is the
/// argmin in both directions.
pub fn match_nearest(c: &DistanceMatrix, policy: MatchPolicy) -> Result<MatchSet> {
    let entries = c.entries();
    if entries.is_empty() {
        return Err(MatchError::EmptyMatrix);
    }

    let argmin_row: Vec<usize> = (0..entries.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..entries.ncols() {
                if entries[(i, j)] < entries[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect();

    let mut matches = Vec::new();
    for (i, &j) in argmin_row.iter().enumerate() {
        let d = entries[(i, j)];
        if let Some(ceiling) = policy.max_distance {
            if d > ceiling {
                continue;
            }
        }
        if policy.mutual {
            let mut best_i = 0;
            for r in 1..entries.nrows() {
                if entries[(r, j)] < entries[(best_i, j)] {
                    best_i = r;
                }
            }
            if best_i != i {
                continue;
            }
        }
        matches.push(Match {
            id1: c.row_ids()[i],
            id2: c.col_ids()[j],
            distance: d,
        });
    }
    Ok(MatchSet { matches, policy })
}

/// Counts and derived scores for a match set against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub predictions: usize,
    pub matchable_anchors: usize,
}

impl MetricsReport {
    pub fn from_counts(
        true_positives: usize,
        predictions: usize,
        matchable_anchors: usize,
    ) -> Self {
        let false_positives = predictions - true_positives;
        let false_negatives = matchable_anchors.saturating_sub(true_positives);
        let precision = if predictions > 0 {
            true_positives as f64 / predictions as f64
        } else {
            0.0
        };
        let recall = if matchable_anchors > 0 {
            true_positives as f64 / matchable_anchors as f64
        } else {
            0.0
        };
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f_score,
            true_positives,
            false_positives,
            false_negatives,
            predictions,
            matchable_anchors,
        }
    }
}

/// Scores predictions against the overlap ground truth: a prediction is
/// correct iff its gt entry is positive; recall is per anchor line with at
/// least one gt partner.
pub fn precision_recall(matches: &MatchSet, gt: &OverlapMatrix) -> Result<MetricsReport> {
    let mut true_positives = 0;
    for m in &matches.matches {
        let row = gt.row_index_of(m.id1).ok_or(MatchError::UnknownId(m.id1))?;
        let col = gt.col_index_of(m.id2).ok_or(MatchError::UnknownId(m.id2))?;
        if gt.entries()[(row, col)] > 0.0 {
            true_positives += 1;
        }
    }
    let matchable = (0..gt.entries().nrows())
        .filter(|&r| gt.entries().row(r).iter().any(|&v| v > 0.0))
        .count();
    Ok(MetricsReport::from_counts(
        true_positives,
        matches.matches.len(),
        matchable,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_adjacency, split_into_sublines, LineSegment2D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut m = DMatrix::from_fn(rows, dim, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..rows {
            let norm = m.row(i).norm();
            for j in 0..dim {
                m[(i, j)] /= norm;
            }
        }
        m
    }

    #[test]
    fn identical_descriptor_sets_have_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = unit_rows(4, 8, &mut rng);
        let c = subline_distances(&d, &d).unwrap();
        for i in 0..4 {
            assert!(c.entries()[(i, i)].abs() < 1e-7);
        }
    }

    #[test]
    fn orthogonal_unit_vectors_are_sqrt_two_apart() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let c = subline_distances(&a, &b).unwrap();
        assert!((c.entries()[(0, 0)] - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distances_match_brute_force_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = unit_rows(4, 6, &mut rng);
        let b = unit_rows(3, 6, &mut rng);
        let c = subline_distances(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let direct = (a.row(i) - b.row(j)).norm();
                assert!((c.entries()[(i, j)] - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DMatrix::zeros(2, 4);
        let b = DMatrix::zeros(2, 5);
        assert!(matches!(
            subline_distances(&a, &b),
            Err(MatchError::DimensionMismatch(4, 5))
        ));
    }

    fn adjacency_for(lengths: &[f64]) -> AdjacencyMatrix {
        let lines: Vec<LineSegment2D> = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                LineSegment2D::new(i as u32, 0.0, i as f64 * 10.0, len, i as f64 * 10.0).unwrap()
            })
            .collect();
        let mut subs = Vec::new();
        for l in &lines {
            subs.extend(split_into_sublines(l, 8.0, 21));
        }
        build_adjacency(&lines, &subs).unwrap()
    }

    #[test]
    fn identity_adjacency_preserves_distances() {
        let adj = adjacency_for(&[80.0, 90.0]); // neither splits
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = subline_distances(&unit_rows(2, 4, &mut rng), &unit_rows(2, 4, &mut rng)).unwrap();
        let k = keyline_distances(&adj, &c, &adj).unwrap();
        assert_eq!(k.entries(), c.entries());
    }

    #[test]
    fn two_subline_keyline_averages_against_single() {
        let adj1 = adjacency_for(&[236.0]); // two sublines
        let adj2 = adjacency_for(&[80.0]); // one subline
        let c = DistanceMatrix::new(
            DMatrix::from_row_slice(2, 1, &[0.3, 0.7]),
            vec![0, 1],
            vec![0],
        );
        let k = keyline_distances(&adj1, &c, &adj2).unwrap();
        assert!((k.entries()[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregation_matches_pairwise_average_oracle() {
        // 2 keylines x 3 keylines with mixed split counts; compare against a
        // brute-force mean over each keyline pair's subline blocks.
        let adj1 = adjacency_for(&[400.0, 90.0]);
        let adj2 = adjacency_for(&[236.0, 70.0, 412.0]);
        let m1 = adj1.sublines();
        let m2 = adj2.sublines();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c =
            subline_distances(&unit_rows(m1, 8, &mut rng), &unit_rows(m2, 8, &mut rng)).unwrap();
        let k = keyline_distances(&adj1, &c, &adj2).unwrap();

        for r in 0..adj1.keylines() {
            for s in 0..adj2.keylines() {
                let rows: Vec<usize> = (0..m1).filter(|&i| adj1.entries()[(r, i)] > 0.0).collect();
                let cols: Vec<usize> = (0..m2).filter(|&j| adj2.entries()[(s, j)] > 0.0).collect();
                let mut sum = 0.0;
                for &i in &rows {
                    for &j in &cols {
                        sum += c.entries()[(i, j)];
                    }
                }
                let mean = sum / (rows.len() * cols.len()) as f64;
                assert!((k.entries()[(r, s)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_zero_diagonal_recovers_identity() {
        let mut entries = DMatrix::from_element(3, 3, 5.0);
        for i in 0..3 {
            entries[(i, i)] = 0.0;
        }
        let c = DistanceMatrix::new(entries, vec![10, 11, 12], vec![20, 21, 22]);
        let m = match_nearest(&c, MatchPolicy::default()).unwrap();
        assert_eq!(m.matches.len(), 3);
        for (i, mt) in m.matches.iter().enumerate() {
            assert_eq!(mt.id1, 10 + i as u32);
            assert_eq!(mt.id2, 20 + i as u32);
        }
    }

    #[test]
    fn all_equal_matrix_with_mutual_policy_leaves_one_match() {
        let c = DistanceMatrix::new(
            DMatrix::from_element(3, 3, 1.0),
            vec![0, 1, 2],
            vec![0, 1, 2],
        );
        let m = match_nearest(
            &c,
            MatchPolicy {
                mutual: true,
                max_distance: None,
            },
        )
        .unwrap();
        // Every row argmins to column 0; column 0 argmins to row 0.
        assert_eq!(m.matches.len(), 1);
        assert_eq!((m.matches[0].id1, m.matches[0].id2), (0, 0));
    }

    #[test]
    fn planted_permutation_is_recovered() {
        let perm = [2usize, 0, 3, 1];
        let mut entries = DMatrix::from_element(4, 4, 2.0);
        for (i, &j) in perm.iter().enumerate() {
            entries[(i, j)] = 0.01;
        }
        let c = DistanceMatrix::new(entries, vec![0, 1, 2, 3], vec![0, 1, 2, 3]);
        let m = match_nearest(&c, MatchPolicy::default()).unwrap();
        assert_eq!(m.matches.len(), 4);
        for mt in m.matches {
            assert_eq!(perm[mt.id1 as usize] as u32, mt.id2);
        }
    }

    #[test]
    fn max_distance_ceiling_filters_matches() {
        let entries = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.9, 0.6]);
        let c = DistanceMatrix::new(entries, vec![0, 1], vec![0, 1]);
        let m = match_nearest(
            &c,
            MatchPolicy {
                mutual: false,
                max_distance: Some(0.5),
            },
        )
        .unwrap();
        assert_eq!(m.matches.len(), 1);
        assert_eq!(m.matches[0].id1, 0);
    }

    fn gt_from(entries: DMatrix<f64>, row_ids: Vec<u32>, col_ids: Vec<u32>) -> OverlapMatrix {
        OverlapMatrix::new(entries, row_ids, col_ids)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = gt_from(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.7]),
            vec![0, 1],
            vec![0, 1],
        );
        let ms = MatchSet {
            matches: vec![
                Match {
                    id1: 0,
                    id2: 0,
                    distance: 0.1,
                },
                Match {
                    id1: 1,
                    id2: 1,
                    distance: 0.1,
                },
            ],
            policy: MatchPolicy::default(),
        };
        let r = precision_recall(&ms, &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gt = gt_from(DMatrix::from_element(2, 2, 0.5), vec![0, 1], vec![0, 1]);
        let ms = MatchSet {
            matches: vec![],
            policy: MatchPolicy::default(),
        };
        let r = precision_recall(&ms, &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.f_score), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_counted_example_four_sevenths() {
        // 4 matchable anchors, 3 predictions, 2 correct.
        let mut entries = DMatrix::zeros(5, 5);
        for i in 0..4 {
            entries[(i, i)] = 1.0;
        }
        let gt = gt_from(entries, vec![0, 1, 2, 3, 4], vec![0, 1, 2, 3, 4]);
        let ms = MatchSet {
            matches: vec![
                Match {
                    id1: 0,
                    id2: 0,
                    distance: 0.0,
                },
                Match {
                    id1: 1,
                    id2: 1,
                    distance: 0.0,
                },
                Match {
                    id1: 2,
                    id2: 3,
                    distance: 0.0,
                },
            ],
            policy: MatchPolicy::default(),
        };
        let r = precision_recall(&ms, &gt).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f_score - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.true_positives, 2);
        assert_eq!(r.false_positives, 1);
        assert_eq!(r.false_negatives, 2);
    }

    #[test]
    fn unknown_id_is_an_error() {
        let gt = gt_from(DMatrix::zeros(1, 1), vec![0], vec![0]);
        let ms = MatchSet {
            matches: vec![Match {
                id1: 7,
                id2: 0,
                distance: 0.0,
            }],
            policy: MatchPolicy::default(),
        };
        assert!(matches!(
            precision_recall(&ms, &gt),
            Err(MatchError::UnknownId(7))
        ));
    }

    proptest! {
        #[test]
        fn keyline_aggregation_equals_subline_mean_for_random_splits(
            lens1 in proptest::collection::vec(20.0f64..500.0, 1..5),
            lens2 in proptest::collection::vec(20.0f64..500.0, 1..5),
            seed in 0u64..1000,
        ) {
            let adj1 = adjacency_for(&lens1);
            let adj2 = adjacency_for(&lens2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = subline_distances(
                &unit_rows(adj1.sublines(), 6, &mut rng),
                &unit_rows(adj2.sublines(), 6, &mut rng),
            ).unwrap();
            let k = keyline_distances(&adj1, &c, &adj2).unwrap();
            for r in 0..adj1.keylines() {
                for s in 0..adj2.keylines() {
                    let rows: Vec<usize> =
                        (0..adj1.sublines()).filter(|&i| adj1.entries()[(r, i)] > 0.0).collect();
                    let cols: Vec<usize> =
                        (0..adj2.sublines()).filter(|&j| adj2.entries()[(s, j)] > 0.0).collect();
                    let mut sum = 0.0;
                    for &i in &rows {
                        for &j in &cols {
                            sum += c.entries()[(i, j)];
                        }
                    }
                    let mean = sum / (rows.len() * cols.len()) as f64;
                    prop_assert!((k.entries()[(r, s)] - mean).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn mutual_matching_is_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_rows(5, 6, &mut rng);
            let b = unit_rows(4, 6, &mut rng);
            let c_ab = subline_distances(&a, &b).unwrap();
            let c_ba = subline_distances(&b, &a).unwrap();
            let policy = MatchPolicy { mutual: true, max_distance: None };
            let m_ab = match_nearest(&c_ab, policy).unwrap();
            let m_ba = match_nearest(&c_ba, policy).unwrap();
            let mut fwd: Vec<(u32, u32)> = m_ab.matches.iter().map(|m| (m.id1, m.id2)).collect();
            let mut rev: Vec<(u32, u32)> = m_ba.matches.iter().map(|m| (m.id2, m.id1)).collect();
            fwd.sort_unstable();
            rev.sort_unstable();
            prop_assert_eq!(fwd, rev);
        }
    }
}
