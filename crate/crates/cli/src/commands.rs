use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;

use sammil_core::bag::SlideBag;
use sammil_core::bench::{run_bench, write_bench_csv, BenchGrid, MeanStd};
use sammil_core::cv::{dataset_folds, train_folds, write_scores_csv, FoldOutcome, SCORES_FILE};
use sammil_core::engine::{load_checkpoint, Dims};
use sammil_core::error::{Error, Result};
use sammil_core::io::{
    load_slides, prepare_output_dir, read_dataset_manifest, read_json, read_slide,
    write_dataset_manifest, write_json, DatasetManifest, SlideEntry, SLIDE_MANIFEST,
};
use sammil_core::metrics::EvalResult;
use sammil_core::synth::{generate_synthetic_dataset, SynthSpec};
use sammil_core::trainer::{check_composite_gradient, metrics_of, predict, RunConfig};

use crate::{BenchArgs, ConvertArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec: SynthSpec = read_json(&a.params)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let manifest = generate_synthetic_dataset(&spec, &a.out, a.force)?;
    let positives = manifest.slides.iter().filter(|s| s.label == 1).count();
    println!(
        "{}: {} slides ({} positive, {} negative), feature_dim {}, written to {}",
        manifest.name,
        manifest.slides.len(),
        positives,
        manifest.slides.len() - positives,
        manifest.feature_dim,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg: RunConfig = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    folds: Vec<FoldSummary<'a>>,
    test_auc: MeanStd,
    test_accuracy: MeanStd,
    test_f1: MeanStd,
}

#[derive(Serialize)]
struct FoldSummary<'a> {
    fold: usize,
    test: &'a EvalResult,
    best_epoch: usize,
    stop_epoch: usize,
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    if a.dry_run {
        print_json(&cfg)?;
        return Ok(ExitCode::SUCCESS);
    }
    let out = a.out.expect("clap requires --out without --dry-run");
    let manifest = read_dataset_manifest(&a.dataset)?;
    if manifest.feature_dim != cfg.dims.d_in {
        return Err(Error::ShapeMismatch(format!(
            "dataset {} has feature_dim {}, config has d_in {}",
            a.dataset.display(),
            manifest.feature_dim,
            cfg.dims.d_in
        )));
    }
    let bags = load_slides(&a.dataset, &manifest)?;
    let folds = dataset_folds(&manifest, cfg.cv_folds, cfg.seed)?;
    prepare_output_dir(&out, a.force)?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("folds.json"), &folds)?;
    let outcomes = train_folds(&bags, &folds, &cfg, &out, a.dump_masks)?;
    let summary = summarize(&outcomes);
    write_json(&out.join("summary.json"), &summary)?;
    for f in &outcomes {
        println!(
            "fold {}: test AUC {:.4}, accuracy {:.4}, F1 {:.4} (best epoch {}, stopped at {})",
            f.fold,
            f.test.auc,
            f.test.accuracy_at_best,
            f.test.f1_at_best,
            f.report.best_epoch,
            f.report.stop_epoch
        );
    }
    println!("test AUC {}", summary.test_auc.percent());
    Ok(ExitCode::SUCCESS)
}

fn summarize(outcomes: &[FoldOutcome]) -> TrainSummary<'_> {
    let col = |f: fn(&EvalResult) -> f64| {
        MeanStd::of(&outcomes.iter().map(|o| f(&o.test)).collect::<Vec<_>>())
    };
    TrainSummary {
        folds: outcomes
            .iter()
            .map(|o| FoldSummary {
                fold: o.fold,
                test: &o.test,
                best_epoch: o.report.best_epoch,
                stop_epoch: o.report.stop_epoch,
            })
            .collect(),
        test_auc: col(|t| t.auc),
        test_accuracy: col(|t| t.accuracy_at_best),
        test_f1: col(|t| t.f1_at_best),
    }
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (header, params) = load_checkpoint(&a.checkpoint)?;
    let mut manifest = read_dataset_manifest(&a.dataset)?;
    if header.dims.d_in != manifest.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint {} expects d_in {}, dataset {} has feature_dim {}",
            a.checkpoint.display(),
            header.dims.d_in,
            a.dataset.display(),
            manifest.feature_dim
        )));
    }
    if a.split != "all" {
        manifest
            .slides
            .retain(|s| s.fold.as_deref() == Some(a.split.as_str()));
        if manifest.slides.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no slide has fold tag {:?}",
                a.split
            )));
        }
    }
    let bags = load_slides(&a.dataset, &manifest)?;
    let preds = predict(&params, &bags, header.use_group_tokens)?;
    let result = metrics_of(&preds)?;
    if let Some(out) = &a.out {
        prepare_output_dir(out, a.force)?;
        write_json(&out.join("eval.json"), &result)?;
        write_scores_csv(&out.join(SCORES_FILE), &preds)?;
    }
    print_json(&result)?;
    Ok(ExitCode::SUCCESS)
}

pub fn bench(a: BenchArgs) -> Result<ExitCode> {
    let mut grid: BenchGrid = read_json(&a.grid)?;
    if let Some(seed) = a.seed {
        grid.fold_seed = seed;
    }
    grid.validate()?;
    if a.dry_run {
        let configs = grid.configs();
        for c in &configs {
            println!("{}", c.label);
        }
        println!(
            "{} runs",
            configs.len() * grid.seeds.len() * grid.eval_fold_list().len()
        );
        return Ok(ExitCode::SUCCESS);
    }
    let out = a.out.expect("clap requires --out without --dry-run");
    if out.exists() && !a.force {
        return Err(Error::AlreadyExists(out));
    }
    let outcome = run_bench(&grid)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    write_bench_csv(&out, &outcome)?;
    for agg in &outcome.aggregates {
        println!(
            "{:<48} AUC {}  F1 {}  acc {}",
            agg.config,
            agg.auc.percent(),
            agg.f1.percent(),
            agg.acc.percent()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_dims(text: &str) -> Result<Dims> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::InvalidArgument(format!(
                "--dims {text:?}: expected four integers d_in,d,h,c"
            ))
        })?;
    match parts[..] {
        [d_in, d, h, c] => {
            let dims = Dims { d_in, d, h, c };
            dims.validate()?;
            Ok(dims)
        }
        _ => Err(Error::InvalidArgument(format!(
            "--dims {text:?}: expected four integers d_in,d,h,c"
        ))),
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let dims = parse_dims(&a.dims)?;
    let cfg = RunConfig {
        dims,
        ..load_config(a.config.as_deref(), None)?
    };
    let report = check_composite_gradient(&cfg, a.instances, a.seed, a.h, a.tolerance, a.corrupt)?;
    print_json(&report)?;
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradient check failed: max relative error {:.3e} in {:?}",
            report.max_rel_error(),
            report.failing_blocks()
        );
        Ok(ExitCode::from(3))
    }
}

fn slide_dirs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.join(SLIDE_MANIFEST).is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: input.to_path_buf(),
                source: e,
            })?
            .path();
        if path.join(SLIDE_MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Malformed(format!(
            "{}: no slide directories found",
            input.display()
        )));
    }
    dirs.sort();
    Ok(dirs)
}

pub fn convert(a: ConvertArgs) -> Result<ExitCode> {
    let mut bags: Vec<SlideBag> = Vec::new();
    for input in &a.inputs {
        for dir in slide_dirs(input)? {
            bags.push(read_slide(&dir)?);
        }
    }
    bags.sort_by(|x, y| x.slide_id.cmp(&y.slide_id));
    let mut seen = BTreeSet::new();
    for b in &bags {
        if !seen.insert(b.slide_id.as_str()) {
            return Err(Error::Malformed(format!(
                "slide id {} appears more than once",
                b.slide_id
            )));
        }
        if b.feature_dim() != bags[0].feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "slide {} has {} features, slide {} has {}",
                b.slide_id,
                b.feature_dim(),
                bags[0].slide_id,
                bags[0].feature_dim()
            )));
        }
    }
    let name = a.name.clone().unwrap_or_else(|| {
        a.out
            .file_name()
            .map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned())
    });
    let manifest = DatasetManifest {
        name,
        class_count: bags.iter().map(|b| b.label + 1).max().unwrap_or(0).max(2),
        feature_dim: bags[0].feature_dim(),
        slides: bags
            .iter()
            .map(|b| SlideEntry {
                slide_id: b.slide_id.clone(),
                path: format!("slides/{}", b.slide_id),
                label: b.label,
                fold: None,
            })
            .collect(),
    };
    manifest.validate()?;
    prepare_output_dir(&a.out, a.force)?;
    for (b, entry) in bags.iter().zip(&manifest.slides) {
        sammil_core::io::write_slide(b, &a.out.join(&entry.path), a.force)?;
    }
    write_dataset_manifest(&a.out, &manifest)?;
    println!(
        "{}: {} slides, feature_dim {}, written to {}",
        manifest.name,
        manifest.slides.len(),
        manifest.feature_dim,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
