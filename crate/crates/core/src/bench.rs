//! Ablation grids: every combination of masking strategy, ratio function
//! and component toggles, trained over seeds and folds, reported as a CSV
//! of per-run rows followed by `mean±std` rows per configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag::SlideBag;
use crate::cv::{bag_folds, dataset_folds, run_fold};
use crate::error::{Error, Result};
use crate::io::{load_slides, read_dataset_manifest};
use crate::masking::{MaskStrategy, RatioFunction};
use crate::synth::{synthesize, SynthSpec};
use crate::trainer::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated in memory from synthetic dataset parameters.
    Synthetic(SynthSpec),
    /// A dataset directory on disk.
    Directory(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Components {
    pub group_tokens: bool,
    pub pseudo_bags: bool,
    pub consistency: bool,
}

impl Components {
    pub const ALL: Self = Self {
        group_tokens: true,
        pseudo_bags: true,
        consistency: true,
    };
    pub const NONE: Self = Self {
        group_tokens: false,
        pseudo_bags: false,
        consistency: false,
    };

    fn label(self) -> String {
        let parts: Vec<&str> = [
            (self.group_tokens, "group"),
            (self.pseudo_bags, "pseudo"),
            (self.consistency, "consistency"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

fn default_folds() -> usize {
    3
}

fn default_cap() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    pub dataset: DatasetSource,
    pub strategies: Vec<MaskStrategy>,
    #[serde(default = "default_ratio_fns")]
    pub ratio_fns: Vec<RatioFunction>,
    #[serde(default = "default_components")]
    pub components: Vec<Components>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Folds to evaluate; all of them when absent.
    #[serde(default)]
    pub eval_folds: Option<Vec<usize>>,
    /// Adds the plain attention-MIL configuration to the grid.
    #[serde(default)]
    pub include_baseline: bool,
    /// Seed of the fold assignment, shared by every cell.
    #[serde(default)]
    pub fold_seed: u64,
    #[serde(default)]
    pub base: RunConfig,
    /// Upper bound on the number of training runs.
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_ratio_fns() -> Vec<RatioFunction> {
    vec![RatioFunction::default()]
}

fn default_components() -> Vec<Components> {
    vec![Components::ALL]
}

/// One grid configuration: a label and the config it trains with. The
/// seed is filled in per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub label: String,
    pub config: RunConfig,
}

pub const BASELINE_LABEL: &str = "baseline";

fn configure(
    base: &RunConfig,
    strategy: MaskStrategy,
    ratio_fn: RatioFunction,
    c: Components,
) -> BenchConfig {
    if strategy == MaskStrategy::None && c == Components::NONE {
        return BenchConfig {
            label: BASELINE_LABEL.into(),
            config: RunConfig {
                ratio_fn,
                ..baseline_from(base)
            },
        };
    }
    let mut config = base.clone();
    config.strategy = strategy;
    config.ratio_fn = ratio_fn;
    config.use_group_tokens = c.group_tokens;
    if !c.pseudo_bags {
        config.alpha = 0.0;
        config.m = 1;
    }
    if !c.consistency {
        config.beta = 0.0;
    }
    let label = if strategy == MaskStrategy::Sg2m {
        format!("{}[{}]/{}", strategy.label(), ratio_fn.label(), c.label())
    } else {
        format!("{}/{}", strategy.label(), c.label())
    };
    BenchConfig { label, config }
}

fn baseline_from(base: &RunConfig) -> RunConfig {
    let b = RunConfig::baseline();
    RunConfig {
        strategy: b.strategy,
        use_group_tokens: b.use_group_tokens,
        m: b.m,
        alpha: b.alpha,
        beta: b.beta,
        ..base.clone()
    }
}

impl BenchGrid {
    /// Distinct configurations in grid order. Ratio functions only fan out
    /// SG2M cells, since the other strategies ignore them.
    pub fn configs(&self) -> Vec<BenchConfig> {
        let mut out: Vec<BenchConfig> = Vec::new();
        let mut push = |c: BenchConfig| {
            if !out.iter().any(|o| o.label == c.label) {
                out.push(c);
            }
        };
        if self.include_baseline {
            push(configure(
                &self.base,
                MaskStrategy::None,
                self.base.ratio_fn,
                Components::NONE,
            ));
        }
        for &strategy in &self.strategies {
            let ratios: &[RatioFunction] = if strategy == MaskStrategy::Sg2m {
                &self.ratio_fns
            } else {
                std::slice::from_ref(&self.base.ratio_fn)
            };
            for &f in ratios {
                for &c in &self.components {
                    push(configure(&self.base, strategy, f, c));
                }
            }
        }
        out
    }

    pub fn eval_fold_list(&self) -> Vec<usize> {
        self.eval_folds
            .clone()
            .unwrap_or_else(|| (0..self.folds).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() && !self.include_baseline {
            return Err(Error::InvalidPlan("grid has no strategies".into()));
        }
        if self.ratio_fns.is_empty() || self.components.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidPlan("grid axes must be non-empty".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidPlan("folds must be at least 2".into()));
        }
        let folds = self.eval_fold_list();
        if folds.is_empty() || folds.iter().any(|&f| f >= self.folds) {
            return Err(Error::InvalidPlan(format!(
                "eval_folds must be non-empty and below {}",
                self.folds
            )));
        }
        for f in &self.ratio_fns {
            f.validate()?;
        }
        let runs = self.configs().len() * self.seeds.len() * folds.len();
        if runs > self.cap {
            return Err(Error::InvalidPlan(format!(
                "grid needs {runs} runs, above the cap of {}",
                self.cap
            )));
        }
        self.base.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: String,
    pub fold: usize,
    pub seed: u64,
    pub auc: f64,
    pub f1: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// Percent with two decimals, e.g. `96.08±1.32`.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config: String,
    pub runs: usize,
    pub auc: MeanStd,
    pub f1: MeanStd,
    pub acc: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<Aggregate>,
}

impl BenchOutcome {
    pub fn aggregate(&self, config: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.config == config)
    }

    /// Rows sorted by (config, fold, seed), then one aggregate row per
    /// configuration with `fold` and `seed` set to `all`. Per-run values
    /// are percentages with four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,fold,seed,auc,f1,acc\n");
        let cell = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4}",
                cell(&r.config),
                r.fold,
                r.seed,
                100.0 * r.auc,
                100.0 * r.f1,
                100.0 * r.acc
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},all,all,{},{},{}",
                cell(&a.config),
                a.auc.percent(),
                a.f1.percent(),
                a.acc.percent()
            );
        }
        out
    }
}

fn load_dataset(grid: &BenchGrid) -> Result<(Vec<SlideBag>, Vec<Vec<String>>)> {
    match &grid.dataset {
        DatasetSource::Synthetic(spec) => {
            let bags = synthesize(spec)?.slides;
            let folds = bag_folds(&bags, grid.folds, grid.fold_seed)?;
            Ok((bags, folds))
        }
        DatasetSource::Directory(dir) => {
            let manifest = read_dataset_manifest(dir)?;
            let bags = load_slides(dir, &manifest)?;
            let folds = dataset_folds(&manifest, grid.folds, grid.fold_seed)?;
            Ok((bags, folds))
        }
    }
}

/// Runs every (config, seed, fold) cell in parallel. The result does not
/// depend on scheduling.
pub fn run_bench(grid: &BenchGrid) -> Result<BenchOutcome> {
    grid.validate()?;
    let (bags, folds) = load_dataset(grid)?;
    if let Some(b) = bags.first() {
        if b.feature_dim() != grid.base.dims.d_in {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} features, base config expects d_in = {}",
                b.feature_dim(),
                grid.base.dims.d_in
            )));
        }
    }
    let eval_folds = grid.eval_fold_list();
    if let Some(&f) = eval_folds.iter().find(|&&f| f >= folds.len()) {
        return Err(Error::InvalidPlan(format!(
            "eval fold {f} but the dataset has {} folds",
            folds.len()
        )));
    }
    let mut cells = Vec::new();
    for bc in grid.configs() {
        for &seed in &grid.seeds {
            for &fold in &eval_folds {
                cells.push((bc.clone(), seed, fold));
            }
        }
    }
    let mut rows = cells
        .into_par_iter()
        .map(|(bc, seed, fold)| {
            let cfg = RunConfig { seed, ..bc.config };
            let outcome = run_fold(&bags, &folds, fold, &cfg)?;
            Ok(BenchRow {
                config: bc.label,
                fold,
                seed,
                auc: outcome.test.auc,
                f1: outcome.test.f1_at_best,
                acc: outcome.test.accuracy_at_best,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (&a.config, a.fold, a.seed).cmp(&(&b.config, b.fold, b.seed)));

    let mut grouped: BTreeMap<&str, Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        grouped.entry(&r.config).or_default().push(r);
    }
    let aggregates = grouped
        .into_iter()
        .map(|(config, rs)| {
            let col =
                |f: fn(&BenchRow) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                config: config.to_string(),
                runs: rs.len(),
                auc: col(|r| r.auc),
                f1: col(|r| r.f1),
                acc: col(|r| r.acc),
            }
        })
        .collect();
    Ok(BenchOutcome { rows, aggregates })
}

pub fn write_bench_csv(path: &Path, outcome: &BenchOutcome) -> Result<()> {
    std::fs::write(path, outcome.to_csv()).map_err(|e| Error::io(path, e))
}
