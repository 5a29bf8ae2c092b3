//! The five pipeline commands. Every command validates its inputs up front,
//! echoes the effective configuration, and exits nonzero unless the
//! requested artifact was fully written.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use linewise::estimation::{auc, AucReport, DEFAULT_AUC_THRESHOLDS};
use linewise::eval::{aggregate_matching, evaluate_pair, MatchingEvaluation, PairEvaluation};
use linewise::matching::{
    keyline_distances, match_nearest, subline_distances, MatchPolicy, MatchSet,
};
use linewise::model::{
    describe_image, init_parameters, load_checkpoint, save_checkpoint, AttentionRecords,
    Checkpoint, LineDescriptorSet, ModelConfig,
};
use linewise::synthetic::{
    make_pair, pair_specs, save_dataset, DatasetHeader, DatasetReader, SyntheticPair,
};
use linewise::tensor::ParameterSet;
use linewise::training::{train_loop, TrainArtifacts, TrainingPair};

use crate::config::RunConfig;

fn load_pairs(path: &Path) -> Result<(DatasetHeader, Vec<TrainingPair>)> {
    let mut reader =
        DatasetReader::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    let header = reader.header().clone();
    let pairs = reader
        .read_all()
        .context("reading dataset pairs")?
        .into_iter()
        .map(|p| p.pair)
        .collect();
    Ok((header, pairs))
}

fn load_model(path: &Path) -> Result<(ModelConfig, ParameterSet)> {
    let ckpt =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ckpt.config, ckpt.params))
}

fn write_json_artifact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    println!("config: {}", config.echo());
    let count = config.dataset.pairs;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let (scene, homography, seed) = pair_specs(&config.scene, &config.homography, i as u64);
        let pair = make_pair(
            &scene,
            &homography,
            &config.noise,
            config.dataset.stride,
            config.model.d,
            seed,
        )
        .with_context(|| format!("generating pair {i}"))?;
        pairs.push(pair);
    }
    let header = DatasetHeader {
        scene: config.scene,
        homography: config.homography,
        noise: config.noise,
        count,
        stride: config.dataset.stride,
        dim: config.model.d,
    };
    save_dataset(out, &header, &pairs)
        .with_context(|| format!("writing dataset {}", out.display()))?;

    let total_lines1: usize = pairs.iter().map(|p| p.pair.lines1.len()).sum();
    let total_lines2: usize = pairs.iter().map(|p| p.pair.lines2.len()).sum();
    let (positive, cells): (usize, usize) = pairs.iter().fold((0, 0), |(pos, cells), p| {
        let e = p.pair.gt.entries();
        (
            pos + e.iter().filter(|&&v| v > 0.0).count(),
            cells + e.nrows() * e.ncols(),
        )
    });
    println!(
        "wrote {}: {} pairs, {:.1} lines/view1, {:.1} lines/view2, gt density {:.4}",
        out.display(),
        count,
        total_lines1 as f64 / count as f64,
        total_lines2 as f64 / count as f64,
        positive as f64 / cells.max(1) as f64
    );
    Ok(())
}

pub fn train(config: &RunConfig, dataset: &Path, out_dir: &Path, resume: bool) -> Result<()> {
    println!("config: {}", config.echo());
    let (header, pairs) = load_pairs(dataset)?;
    anyhow::ensure!(
        header.dim == config.model.d,
        "dataset descriptor dimension {} does not match model d {}",
        header.dim,
        config.model.d
    );
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let artifacts = TrainArtifacts {
        checkpoint_path: out_dir.join("checkpoint.lwck"),
        loss_csv_path: out_dir.join("loss.csv"),
    };
    let resume_from = if resume {
        Some(load_checkpoint(&artifacts.checkpoint_path).context("loading checkpoint for resume")?)
    } else {
        None
    };
    let outcome = train_loop(
        &pairs,
        &config.model,
        &config.train,
        Some(&artifacts),
        resume_from,
    )?;
    let first = outcome.history.first().map(|&(_, l)| l);
    let last = outcome.history.last().map(|&(_, l)| l);
    println!(
        "trained to step {} ({} losses recorded, first {:?}, last {:?}); checkpoint at {}",
        outcome.trained_steps,
        outcome.history.len(),
        first,
        last,
        artifacts.checkpoint_path.display()
    );
    Ok(())
}

fn parallel_evaluate(
    pairs: &[TrainingPair],
    params: &ParameterSet,
    model: &ModelConfig,
    policy: MatchPolicy,
    ransac: Option<&linewise::estimation::RansacConfig>,
) -> Result<Vec<PairEvaluation>> {
    pairs
        .par_iter()
        .map(|p| evaluate_pair(p, params, model, policy, ransac).map_err(anyhow::Error::from))
        .collect()
}

#[derive(Serialize)]
struct MatchReportJson {
    config: RunConfig,
    trained: MatchingEvaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    untrained: Option<MatchingEvaluation>,
}

pub fn eval_match(
    config: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    compare_untrained: bool,
) -> Result<()> {
    println!("config: {}", config.echo());
    let (model, params) = load_model(checkpoint)?;
    let (header, pairs) = load_pairs(dataset)?;
    anyhow::ensure!(
        header.dim == model.d,
        "dataset descriptor dimension {} does not match checkpoint d {}",
        header.dim,
        model.d
    );
    if pairs.is_empty() {
        bail!("dataset is empty");
    }

    let evals = parallel_evaluate(&pairs, &params, &model, config.match_policy, None)?;
    let trained = aggregate_matching(&pairs, &evals)?;
    let untrained = if compare_untrained {
        let fresh = init_parameters(&model, config.train.seed)?;
        let evals = parallel_evaluate(&pairs, &fresh, &model, config.match_policy, None)?;
        Some(aggregate_matching(&pairs, &evals)?)
    } else {
        None
    };

    let table = |tag: &str, e: &MatchingEvaluation| {
        println!(
            "{tag}: P {:.3} R {:.3} F {:.3} | short F {:.3} mid F {:.3} long F {:.3}",
            e.overall.precision,
            e.overall.recall,
            e.overall.f_score,
            e.per_tercile[0].f_score,
            e.per_tercile[1].f_score,
            e.per_tercile[2].f_score
        );
    };
    table("trained", &trained);
    if let Some(u) = &untrained {
        table("untrained", u);
    }

    write_json_artifact(
        out,
        &MatchReportJson {
            config: config.clone(),
            trained,
            untrained,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct HomographyReportJson {
    config: RunConfig,
    /// Integration convention for the cumulative curve.
    convention: &'static str,
    auc: AucReport,
}

pub fn eval_homography(
    config: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    curve: Option<&Path>,
) -> Result<()> {
    println!("config: {}", config.echo());
    let (model, params) = load_model(checkpoint)?;
    let (header, pairs) = load_pairs(dataset)?;
    anyhow::ensure!(header.dim == model.d, "dataset/model dimension mismatch");
    if pairs.is_empty() {
        bail!("dataset is empty");
    }

    let evals = parallel_evaluate(
        &pairs,
        &params,
        &model,
        config.match_policy,
        Some(&config.ransac),
    )?;
    let errors: Vec<f64> = evals
        .iter()
        .map(|e| e.corner_error.expect("ransac requested"))
        .collect();
    let report = auc(&errors, &DEFAULT_AUC_THRESHOLDS);
    for (t, v) in report.thresholds.iter().zip(&report.values) {
        println!("AUC@{t}px: {v:.4}");
    }

    let default_curve = out.with_extension("curve.csv");
    let curve_path = curve.unwrap_or(&default_curve);
    let mut sorted = errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut csv = String::from("error_px,cdf\n");
    for (i, e) in sorted.iter().enumerate() {
        let cdf = (i + 1) as f64 / sorted.len() as f64;
        csv.push_str(&format!("{e},{cdf}\n"));
    }
    std::fs::write(curve_path, csv).with_context(|| format!("writing {}", curve_path.display()))?;
    println!("wrote {}", curve_path.display());

    write_json_artifact(
        out,
        &HomographyReportJson {
            config: config.clone(),
            convention: "exact empirical-CDF integral",
            auc: report,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LineAttentionJson {
    keyline_id: u32,
    /// Per subline: token count and `[LINE]`-slot rows per layer and head
    /// (masked slots are absent).
    sublines: Vec<SublineAttentionJson>,
    /// Per subline: its line-to-line attention rows per layer and head,
    /// each of length m (the image's subline count).
    signature_rows: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Serialize)]
struct SublineAttentionJson {
    index_within_parent: usize,
    tokens: usize,
    line_slot: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct AttentionDumpJson {
    pair_index: usize,
    anchor: LineAttentionJson,
    /// The anchor's nearest-neighbor partner in the second image, when one
    /// exists, with its attention in the same layout for side-by-side
    /// comparison.
    matched: Option<LineAttentionJson>,
}

fn line_attention(
    set: &LineDescriptorSet,
    records: &AttentionRecords,
    keyline_id: u32,
) -> Option<LineAttentionJson> {
    let indices: Vec<usize> = set
        .sublines
        .iter()
        .enumerate()
        .filter(|(_, s)| s.parent_keyline_id == keyline_id)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return None;
    }
    let m = records.sublines;
    let sublines = indices
        .iter()
        .map(|&i| SublineAttentionJson {
            index_within_parent: set.sublines[i].index_within_parent,
            tokens: records.line_slot[i][0][0].len() - 1,
            line_slot: records.line_slot[i].clone(),
        })
        .collect();
    let signature_rows = indices
        .iter()
        .map(|&i| {
            records
                .signature
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|mat| mat[i * m..(i + 1) * m].to_vec())
                        .collect()
                })
                .collect()
        })
        .collect();
    Some(LineAttentionJson {
        keyline_id,
        sublines,
        signature_rows,
    })
}

pub fn dump_attention(
    config: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    pair_index: usize,
    line_id: u32,
    out: &Path,
) -> Result<()> {
    println!("config: {}", config.echo());
    let (model, params) = load_model(checkpoint)?;
    let mut reader = DatasetReader::open(dataset)
        .with_context(|| format!("opening dataset {}", dataset.display()))?;
    let SyntheticPair { pair, .. } = reader
        .read_pair(pair_index)
        .with_context(|| format!("pair {pair_index}"))?;

    let set1 = describe_image(
        &pair.lines1,
        &pair.map1,
        &params,
        &pair.confidence1,
        &model,
        true,
    )?;
    let set2 = describe_image(
        &pair.lines2,
        &pair.map2,
        &params,
        &pair.confidence2,
        &model,
        true,
    )?;
    let rec1 = set1.attention.clone().expect("attention requested");
    let rec2 = set2.attention.clone().expect("attention requested");

    let anchor = line_attention(&set1, &rec1, line_id)
        .with_context(|| format!("line {line_id} is not described in pair {pair_index}"))?;

    // The anchor's partner under the same matcher the evaluators use.
    let c_sub = subline_distances(&set1.descriptors, &set2.descriptors)?;
    let c_key = keyline_distances(&set1.adjacency, &c_sub, &set2.adjacency)?;
    let matches: MatchSet = match_nearest(&c_key, config.match_policy)?;
    let matched = matches
        .matches
        .iter()
        .find(|m| m.id1 == line_id)
        .and_then(|m| line_attention(&set2, &rec2, m.id2));

    write_json_artifact(
        out,
        &AttentionDumpJson {
            pair_index,
            anchor,
            matched,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Writes a checkpoint with freshly initialized parameters; used to evaluate
/// the untrained baseline through the same file-based interface.
pub fn init_checkpoint(config: &RunConfig, out: &Path) -> Result<()> {
    println!("config: {}", config.echo());
    let params = init_parameters(&config.model, config.train.seed)?;
    save_checkpoint(
        out,
        &Checkpoint {
            config: config.model.clone(),
            params,
            optimizer: None,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
