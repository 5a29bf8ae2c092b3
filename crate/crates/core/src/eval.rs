//! Evaluation harness: the full per-pair pipeline (describe, aggregate
//! distances, match, optionally estimate the homography) and aggregation
//! into overall and per-length-tercile metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{corner_error, ransac_homography, RansacConfig, MIN_LINE_PAIRS};
use crate::matching::{
    keyline_distances, match_nearest, subline_distances, MatchError, MatchPolicy, MatchSet,
    MetricsReport,
};
use crate::model::{describe_image, ModelConfig, ModelError};
use crate::tensor::ParameterSet;
use crate::training::TrainingPair;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("no pairs to evaluate")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Outcome of the pipeline on one pair. A pair whose images yield no valid
/// lines produces an empty match set (and an infinite corner error when
/// estimation was requested) instead of failing the whole evaluation.
#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub matches: MatchSet,
    pub corner_error: Option<f64>,
}

pub fn evaluate_pair(
    pair: &TrainingPair,
    params: &ParameterSet,
    config: &ModelConfig,
    policy: MatchPolicy,
    ransac: Option<&RansacConfig>,
) -> Result<PairEvaluation> {
    let describe = |lines, map, conf| match describe_image(lines, map, params, conf, config, false)
    {
        Ok(set) => Ok(Some(set)),
        Err(ModelError::NoValidLines) => Ok(None),
        Err(e) => Err(EvalError::from(e)),
    };
    let set1 = describe(&pair.lines1, &pair.map1, &pair.confidence1)?;
    let set2 = describe(&pair.lines2, &pair.map2, &pair.confidence2)?;
    let (Some(set1), Some(set2)) = (set1, set2) else {
        return Ok(PairEvaluation {
            matches: MatchSet {
                matches: vec![],
                policy,
            },
            corner_error: ransac.map(|_| f64::INFINITY),
        });
    };

    let c_sub = subline_distances(&set1.descriptors, &set2.descriptors)?;
    let c_key = keyline_distances(&set1.adjacency, &c_sub, &set2.adjacency)?;
    let matches = match_nearest(&c_key, policy)?;

    let corner = ransac.map(|cfg| {
        if matches.matches.len() < MIN_LINE_PAIRS {
            return f64::INFINITY;
        }
        match ransac_homography(&matches, &pair.lines1, &pair.lines2, cfg) {
            Ok(est) => corner_error(
                &est.h,
                &pair.h_gt,
                config.image_width as f64,
                config.image_height as f64,
            )
            .unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    });

    Ok(PairEvaluation {
        matches,
        corner_error: corner,
    })
}

/// Length cut points splitting anchor lines into short/mid/long thirds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TercileBounds {
    pub low: f64,
    pub high: f64,
}

/// Terciles over every anchor (first-image) line length in the dataset.
pub fn length_terciles(pairs: &[TrainingPair]) -> Result<TercileBounds> {
    let mut lengths: Vec<f64> = pairs
        .iter()
        .flat_map(|p| p.lines1.iter().map(|l| l.length()))
        .collect();
    if lengths.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = lengths.len();
    Ok(TercileBounds {
        low: lengths[n / 3],
        high: lengths[(2 * n) / 3],
    })
}

pub fn tercile_of(length: f64, bounds: &TercileBounds) -> usize {
    if length < bounds.low {
        0
    } else if length < bounds.high {
        1
    } else {
        2
    }
}

/// Matching metrics over a dataset, overall and split by anchor length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingEvaluation {
    pub overall: MetricsReport,
    /// Short, mid, long.
    pub per_tercile: [MetricsReport; 3],
    pub tercile_bounds: TercileBounds,
}

pub fn aggregate_matching(
    pairs: &[TrainingPair],
    evaluations: &[PairEvaluation],
) -> Result<MatchingEvaluation> {
    assert_eq!(pairs.len(), evaluations.len());
    if pairs.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let bounds = length_terciles(pairs)?;

    let mut tp = [0usize; 4];
    let mut predictions = [0usize; 4];
    let mut matchable = [0usize; 4];

    for (pair, eval) in pairs.iter().zip(evaluations) {
        let length_of = |id: u32| {
            pair.lines1
                .iter()
                .find(|l| l.id == id)
                .map(|l| l.length())
                .ok_or(MatchError::UnknownId(id))
        };
        for m in &eval.matches.matches {
            let t = tercile_of(length_of(m.id1)?, &bounds);
            predictions[3] += 1;
            predictions[t] += 1;
            if pair.gt.strength(m.id1, m.id2) > 0.0 {
                tp[3] += 1;
                tp[t] += 1;
            }
        }
        for (row, &id) in pair.gt.row_ids().iter().enumerate() {
            if pair.gt.entries().row(row).iter().any(|&v| v > 0.0) {
                let t = tercile_of(length_of(id)?, &bounds);
                matchable[3] += 1;
                matchable[t] += 1;
            }
        }
    }

    let report = |i: usize| MetricsReport::from_counts(tp[i], predictions[i], matchable[i]);
    Ok(MatchingEvaluation {
        overall: report(3),
        per_tercile: [report(0), report(1), report(2)],
        tercile_bounds: bounds,
    })
}

/// Serial convenience wrappers; callers that want parallelism map
/// [`evaluate_pair`] themselves and aggregate.
pub fn evaluate_matching(
    pairs: &[TrainingPair],
    params: &ParameterSet,
    config: &ModelConfig,
    policy: MatchPolicy,
) -> Result<MatchingEvaluation> {
    let evals: Vec<PairEvaluation> = pairs
        .iter()
        .map(|p| evaluate_pair(p, params, config, policy, None))
        .collect::<Result<_>>()?;
    aggregate_matching(pairs, &evals)
}

pub fn evaluate_homography(
    pairs: &[TrainingPair],
    params: &ParameterSet,
    config: &ModelConfig,
    policy: MatchPolicy,
    ransac: &RansacConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    pairs
        .iter()
        .map(|p| {
            evaluate_pair(p, params, config, policy, Some(ransac))
                .map(|e| e.corner_error.expect("requested"))
        })
        .collect()
}

/// Mean triplet loss over a dataset without updating parameters (gradient
/// buffers are restored untouched). Pairs without valid anchors are skipped.
pub fn mean_loss(
    pairs: &[TrainingPair],
    params: &ParameterSet,
    config: &ModelConfig,
    margin: f64,
) -> Option<f64> {
    let mut scratch = params.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        if let Ok(Some(loss)) =
            crate::training::pair_loss_and_grads(pair, &mut scratch, config, margin)
        {
            total += loss;
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}
