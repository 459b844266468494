//! Cross-validation: fold assignment, the train/validation/test split of a
//! fold, and per-fold training with test evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bag::SlideBag;
use crate::error::{Error, Result};
use crate::io::{make_folds_from, write_json, DatasetManifest};
use crate::metrics::EvalResult;
use crate::rng;
use crate::trainer::{self, fit, metrics_of, predict, RunConfig, SlidePrediction, TrainReport};

/// Slide ids of each fold. Uses the fold tags recorded in the manifest
/// (one fold per distinct tag, in sorted tag order) when every slide has
/// one, otherwise a stratified assignment from `seed`.
pub fn dataset_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let recorded: Option<Vec<&str>> = manifest.slides.iter().map(|s| s.fold.as_deref()).collect();
    match recorded {
        Some(tags) if !tags.is_empty() => {
            let mut by_tag: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for (entry, tag) in manifest.slides.iter().zip(tags) {
                by_tag.entry(tag).or_default().push(entry.slide_id.clone());
            }
            if by_tag.len() < 2 {
                return Err(Error::Malformed(
                    "manifest assigns every slide to one fold".into(),
                ));
            }
            Ok(by_tag
                .into_values()
                .map(|mut ids| {
                    ids.sort();
                    ids
                })
                .collect())
        }
        _ => make_folds_from(
            manifest
                .slides
                .iter()
                .map(|s| (s.slide_id.clone(), s.label)),
            k,
            seed,
        ),
    }
}

pub fn bag_folds(bags: &[SlideBag], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    make_folds_from(bags.iter().map(|b| (b.slide_id.clone(), b.label)), k, seed)
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<SlideBag>,
    pub val: Vec<SlideBag>,
    pub test: Vec<SlideBag>,
}

/// Fold `fold` is the test set. From the remaining slides, a stratified
/// `val_fraction` of each label (at least one slide for every label with
/// two or more) is held out for early stopping.
pub fn split_fold(
    bags: &[SlideBag],
    folds: &[Vec<String>],
    fold: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<FoldSplit> {
    let test_ids: BTreeSet<&str> = folds
        .get(fold)
        .ok_or_else(|| Error::invalid(format!("fold {fold} out of range (have {})", folds.len())))?
        .iter()
        .map(String::as_str)
        .collect();
    let known: BTreeSet<&str> = bags.iter().map(|b| b.slide_id.as_str()).collect();
    if let Some(missing) = test_ids.iter().find(|id| !known.contains(*id)) {
        return Err(Error::Malformed(format!(
            "fold {fold} names unknown slide {missing}"
        )));
    }

    let mut by_label: BTreeMap<usize, Vec<&SlideBag>> = BTreeMap::new();
    let mut test = Vec::new();
    for b in bags {
        if test_ids.contains(b.slide_id.as_str()) {
            test.push(b.clone());
        } else {
            by_label.entry(b.label).or_default().push(b);
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, mut group) in by_label {
        group.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        group.shuffle(&mut rng::stream(
            seed,
            &["val".into(), (fold as u64).into(), (label as u64).into()],
        ));
        let n = group.len();
        let n_val = if n >= 2 {
            ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend(group[..n_val].iter().map(|b| (*b).clone()));
        train.extend(group[n_val..].iter().map(|b| (*b).clone()));
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    }
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Malformed(format!(
            "fold {fold}: split has {} train / {} val / {} test slides; every part must be non-empty",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(FoldSplit { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test: EvalResult,
    pub report: TrainReport,
}

/// Trains on one fold in memory and scores its test set.
pub fn run_fold(
    bags: &[SlideBag],
    folds: &[Vec<String>],
    fold: usize,
    cfg: &RunConfig,
) -> Result<FoldOutcome> {
    let split = split_fold(bags, folds, fold, cfg.val_fraction, cfg.seed)?;
    let result = fit(&split.train, &split.val, cfg, None)?;
    let preds = predict(&result.best_params, &split.test, cfg.use_group_tokens)?;
    Ok(FoldOutcome {
        fold,
        test: metrics_of(&preds)?,
        report: result.report,
    })
}

pub const TEST_RESULT_FILE: &str = "test.json";
pub const SCORES_FILE: &str = "scores.csv";

/// Per-slide scores: one row per slide with its positive-class probability
/// and the attention weight of every token, `;`-separated.
pub fn write_scores_csv(path: &Path, preds: &[SlidePrediction]) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["slide_id", "label", "score", "attention"])
        .map_err(csv_err)?;
    for p in preds {
        let score = p
            .probs
            .get(1)
            .or(p.probs.first())
            .copied()
            .unwrap_or(f64::NAN);
        let attention: Vec<String> = p.attention.iter().map(f64::to_string).collect();
        w.write_record([
            p.slide_id.clone(),
            p.label.to_string(),
            score.to_string(),
            attention.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cross-validated training with artifacts under `out_dir/fold_<i>/`: the
/// trainer outputs plus `test.json` and `scores.csv` for the test fold.
pub fn train_folds(
    bags: &[SlideBag],
    folds: &[Vec<String>],
    cfg: &RunConfig,
    out_dir: &Path,
    dump_masks: bool,
) -> Result<Vec<FoldOutcome>> {
    let mut outcomes = Vec::with_capacity(folds.len());
    for fold in 0..folds.len() {
        let split = split_fold(bags, folds, fold, cfg.val_fraction, cfg.seed)?;
        let dir = out_dir.join(format!("fold_{fold}"));
        let (report, params) = trainer::train(&split.train, &split.val, cfg, &dir, dump_masks)?;
        let preds = predict(&params, &split.test, cfg.use_group_tokens)?;
        let test = metrics_of(&preds)?;
        write_json(&dir.join(TEST_RESULT_FILE), &test)?;
        write_scores_csv(&dir.join(SCORES_FILE), &preds)?;
        outcomes.push(FoldOutcome { fold, test, report });
    }
    Ok(outcomes)
}
