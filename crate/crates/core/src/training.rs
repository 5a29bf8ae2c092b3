//! Triplet training over paired synthetic views: positives are the most
//! overlapped ground-truth partners, negatives are mined semi-hard, and the
//! loss is a squared-distance hinge with margin.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Homography, LineSegment2D, OverlapMatrix};
use crate::model::{
    aggregate_keylines_on, describe_image_on, Checkpoint, ConfidenceModel, DescriptorMap,
    ModelConfig, ModelError, OptimizerCheckpoint,
};
use crate::tensor::{adam_step, AdamState, BoundParams, ParameterSet, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset has no pairs")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One supervised example: two views of the same line scene related by a
/// known homography, with dense descriptor maps and the overlap ground
/// truth derived from that homography.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lines1: Vec<LineSegment2D>,
    pub lines2: Vec<LineSegment2D>,
    pub map1: DescriptorMap,
    pub map2: DescriptorMap,
    pub h_gt: Homography,
    pub gt: OverlapMatrix,
    pub confidence1: ConfidenceModel,
    pub confidence2: ConfidenceModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Triplet margin.
    pub margin: f64,
    pub learning_rate: f64,
    pub steps: u64,
    /// Image pairs contributing gradients to one optimizer step.
    pub pairs_per_step: usize,
    pub seed: u64,
    /// Steps between periodic checkpoints (0 disables them).
    pub checkpoint_every: u64,
    /// Steps between progress log lines (0 disables them).
    pub progress_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            learning_rate: 0.001,
            steps: 2000,
            pairs_per_step: 1,
            seed: 0,
            checkpoint_every: 500,
            progress_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(TrainError::BadConfig(format!(
                "margin {} must be > 0",
                self.margin
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.pairs_per_step == 0 {
            return Err(TrainError::BadConfig("pairs_per_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// For every anchor row with at least one positive entry, the column of the
/// strongest overlap; ties break toward the lower column id.
pub fn select_positives(gt: &OverlapMatrix) -> Vec<(usize, usize)> {
    let entries = gt.entries();
    let mut out = Vec::new();
    for r in 0..entries.nrows() {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..entries.ncols() {
            let v = entries[(r, c)];
            if v <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bc, bv)) => v > bv || (v == bv && gt.col_ids()[c] < gt.col_ids()[bc]),
            };
            if better {
                best = Some((c, v));
            }
        }
        if let Some((c, _)) = best {
            out.push((r, c));
        }
    }
    out
}

/// Semi-hard negative mining on squared Euclidean distances: among
/// candidates farther from the anchor than the positive, pick the nearest;
/// when none qualify, fall back to the farthest candidate, which keeps the
/// loss finite and the gradients mild. Returns an index into `negatives`.
pub fn mine_semi_hard(anchor: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Option<usize> {
    if negatives.is_empty() {
        return None;
    }
    let sq =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let d_pos = sq(anchor, positive);
    let mut semi_hard: Option<(usize, f64)> = None;
    let mut easiest: (usize, f64) = (0, f64::NEG_INFINITY);
    for (i, n) in negatives.iter().enumerate() {
        let d = sq(anchor, n);
        if d > d_pos {
            match semi_hard {
                Some((_, best)) if best <= d => {}
                _ => semi_hard = Some((i, d)),
            }
        }
        if d > easiest.1 {
            easiest = (i, d);
        }
    }
    Some(semi_hard.map(|(i, _)| i).unwrap_or(easiest.0))
}

/// Batch triplet loss on the tape:
/// `mean(max(0, margin + |a-p|^2 - |a-n|^2))`. Each entry is a `[1, D]` row.
pub fn triplet_loss(tape: &mut Tape, triplets: &[(Var, Var, Var)], margin: f64) -> Result<Var> {
    assert!(
        !triplets.is_empty(),
        "triplet_loss needs at least one triplet"
    );
    let mut total: Option<Var> = None;
    for &(a, p, n) in triplets {
        let dp = tape.sub(a, p)?;
        let dp2 = tape.mul(dp, dp)?;
        let d_pos = tape.sum(dp2)?;
        let dn = tape.sub(a, n)?;
        let dn2 = tape.mul(dn, dn)?;
        let d_neg = tape.sum(dn2)?;
        let diff = tape.sub(d_pos, d_neg)?;
        let shifted = tape.add_const(diff, margin)?;
        let hinge = tape.relu(shifted)?;
        total = Some(match total {
            None => hinge,
            Some(acc) => tape.add(acc, hinge)?,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / triplets.len() as f64)?)
}

/// Forward both views, mine triplets over keyline descriptors, and
/// accumulate the loss gradient into the parameter set. Returns the batch
/// loss, or `None` when the pair yields no valid anchor.
pub fn pair_loss_and_grads(
    pair: &TrainingPair,
    params: &mut ParameterSet,
    model_config: &ModelConfig,
    margin: f64,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let fwd1 = describe_image_on(
        &mut tape,
        &bound,
        &pair.lines1,
        &pair.map1,
        &pair.confidence1,
        model_config,
    );
    let fwd1 = match fwd1 {
        Ok(f) => f,
        Err(ModelError::NoValidLines) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let fwd2 = match describe_image_on(
        &mut tape,
        &bound,
        &pair.lines2,
        &pair.map2,
        &pair.confidence2,
        model_config,
    ) {
        Ok(f) => f,
        Err(ModelError::NoValidLines) => return Ok(None),
        Err(e) => return Err(e.into()),
    };

    let anchors = aggregate_keylines_on(&mut tape, &fwd1)?;
    let candidates = aggregate_keylines_on(&mut tape, &fwd2)?;
    let d = model_config.d;
    let anchor_rows: Vec<Vec<f64>> = (0..fwd1.keylines.len())
        .map(|r| tape.values(anchors)[r * d..(r + 1) * d].to_vec())
        .collect();
    let candidate_rows: Vec<Vec<f64>> = (0..fwd2.keylines.len())
        .map(|r| tape.values(candidates)[r * d..(r + 1) * d].to_vec())
        .collect();

    let row_of_1 = |id: u32| fwd1.keylines.iter().position(|k| k.id == id);
    let row_of_2 = |id: u32| fwd2.keylines.iter().position(|k| k.id == id);

    let mut triplets = Vec::new();
    for (gt_row, gt_col) in select_positives(&pair.gt) {
        let anchor_id = pair.gt.row_ids()[gt_row];
        let positive_id = pair.gt.col_ids()[gt_col];
        let (Some(a_row), Some(p_row)) = (row_of_1(anchor_id), row_of_2(positive_id)) else {
            continue; // filtered out by token-count bounds
        };
        // Negatives: described keylines of image 2 with zero gt strength for
        // this anchor. A gt-positive line can never be picked.
        let negative_rows: Vec<usize> = fwd2
            .keylines
            .iter()
            .enumerate()
            .filter(|(_, k)| pair.gt.strength(anchor_id, k.id) == 0.0)
            .map(|(row, _)| row)
            .collect();
        let negative_refs: Vec<&[f64]> = negative_rows
            .iter()
            .map(|&r| candidate_rows[r].as_slice())
            .collect();
        let Some(pick) =
            mine_semi_hard(&anchor_rows[a_row], &candidate_rows[p_row], &negative_refs)
        else {
            continue;
        };
        let n_row = negative_rows[pick];

        let a = tape.slice_rows(anchors, a_row, 1)?;
        let p = tape.slice_rows(candidates, p_row, 1)?;
        let n = tape.slice_rows(candidates, n_row, 1)?;
        triplets.push((a, p, n));
    }
    if triplets.is_empty() {
        return Ok(None);
    }

    let loss = triplet_loss(&mut tape, &triplets, margin)?;
    let value = tape.value_scalar(loss);
    tape.backward(loss)?;
    bound.accumulate_grads(&tape, params)?;
    Ok(Some(value))
}

/// One optimizer step on one pair: zero gradients, forward/backward, Adam
/// update. Pairs without valid anchors leave the parameters untouched.
pub fn train_step(
    pair: &TrainingPair,
    params: &mut ParameterSet,
    optimizer: &mut AdamState,
    model_config: &ModelConfig,
    margin: f64,
) -> Result<Option<f64>> {
    params.zero_grads();
    let loss = pair_loss_and_grads(pair, params, model_config, margin)?;
    if loss.is_some() {
        adam_step(params, optimizer)?;
    }
    Ok(loss)
}

/// Where the loop writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub optimizer: AdamState,
    pub trained_steps: u64,
    /// (step, batch loss) for every step that produced a loss in this run.
    pub history: Vec<(u64, f64)>,
}

/// Deterministic pair choice for a step: the per-step RNG stream makes the
/// schedule independent of when (or whether) the run was resumed.
fn step_pair_indices(seed: u64, step: u64, pairs_per_step: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(step));
    (0..pairs_per_step).map(|_| rng.gen_range(0..n)).collect()
}

/// Seeded, resumable training loop with periodic checkpoints and a loss CSV.
/// `resume` continues from a checkpoint produced by an earlier run with the
/// same configs.
pub fn train_loop(
    dataset: &[TrainingPair],
    model_config: &ModelConfig,
    config: &TrainConfig,
    artifacts: Option<&TrainArtifacts>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate().map_err(TrainError::from)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let (mut params, mut optimizer, start_step) = match resume {
        Some(ckpt) => {
            let opt = ckpt.optimizer.unwrap_or_else(|| OptimizerCheckpoint {
                state: AdamState::new(config.learning_rate),
                trained_steps: 0,
            });
            (ckpt.params, opt.state, opt.trained_steps)
        }
        None => (
            crate::model::init_parameters(model_config, config.seed)?,
            AdamState::new(config.learning_rate),
            0,
        ),
    };

    let mut csv = match artifacts {
        Some(a) => {
            let file = if start_step > 0 {
                std::fs::OpenOptions::new()
                    .append(true)
                    .open(&a.loss_csv_path)
                    .or_else(|_| {
                        std::fs::OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(&a.loss_csv_path)
                    })?
            } else {
                let mut f = std::fs::File::create(&a.loss_csv_path)?;
                writeln!(f, "step,loss")?;
                f
            };
            Some(file)
        }
        None => None,
    };

    let save = |params: &ParameterSet, optimizer: &AdamState, steps: u64| -> Result<()> {
        if let Some(a) = artifacts {
            let ckpt = Checkpoint {
                config: model_config.clone(),
                params: params.clone(),
                optimizer: Some(OptimizerCheckpoint {
                    state: optimizer.clone(),
                    trained_steps: steps,
                }),
            };
            crate::model::save_checkpoint(&a.checkpoint_path, &ckpt)?;
        }
        Ok(())
    };

    let mut history = Vec::new();
    for step in start_step..config.steps {
        let indices = step_pair_indices(config.seed, step, config.pairs_per_step, dataset.len());
        params.zero_grads();
        let mut batch_loss = 0.0;
        let mut contributing = 0usize;
        for idx in indices {
            if let Some(loss) =
                pair_loss_and_grads(&dataset[idx], &mut params, model_config, config.margin)?
            {
                batch_loss += loss;
                contributing += 1;
            }
        }
        if contributing > 0 {
            adam_step(&mut params, &mut optimizer)?;
            let loss = batch_loss / contributing as f64;
            history.push((step, loss));
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{step},{loss}")?;
            }
            if config.progress_every > 0 && step % config.progress_every == 0 {
                log::info!("step {step}: loss {loss:.6}");
            }
        } else {
            log::warn!("step {step}: no valid anchors in the sampled pairs, skipped");
        }
        if config.checkpoint_every > 0
            && step + 1 < config.steps
            && (step + 1) % config.checkpoint_every == 0
        {
            save(&params, &optimizer, step + 1)?;
        }
    }
    save(&params, &optimizer, config.steps)?;
    if let Some(f) = csv.as_mut() {
        f.flush()?;
    }

    Ok(TrainOutcome {
        params,
        optimizer,
        trained_steps: config.steps,
        history,
    })
}
