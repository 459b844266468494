//! The training loop: per-slide masking, forward, pseudo-bag and
//! consistency losses, one Adam step per slide, and early stopping on
//! validation AUC.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag::{AugmentedBag, SlideBag};
use crate::engine::{
    backward_from, compare_gradients, cross_entropy, cross_entropy_grad, forward, init_params,
    save_checkpoint, softmax, CheckpointHeader, Dims, GradCheckReport, Gradients, ModelParams,
    BLOCK_NAMES,
};
use crate::error::{Error, Result};
use crate::group::augment_bag;
use crate::io::write_json;
use crate::masking::{self, GroupMask, MaskPlan, MaskStrategy, RatioFunction};
use crate::metrics::{evaluate_probabilities, EvalResult};
use crate::regularizers::{
    consistency_ids, consistency_loss, pseudo_bag_loss, pseudo_bags_for, total_loss,
    ConsistencyMode, PseudoBagSet, Remainder,
};
use crate::rng::{self, derive_seed};

/// Every hyper-parameter of a run. Serialized in full so a config file
/// documents the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: MaskStrategy,
    pub ratio_fn: RatioFunction,
    pub mr_target: f64,
    /// Number of pseudo-bags.
    pub m: usize,
    pub remainder: Remainder,
    pub alpha: f64,
    pub beta: f64,
    pub consistency_mode: ConsistencyMode,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dims: Dims,
    pub use_group_tokens: bool,
    /// Folds used by cross-validated training.
    pub cv_folds: usize,
    /// Share of each label in the training folds held out for early stopping.
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Sg2m,
            ratio_fn: RatioFunction::default(),
            mr_target: 0.5,
            m: 4,
            remainder: Remainder::Discard,
            alpha: 0.5,
            beta: 0.1,
            consistency_mode: ConsistencyMode::WithinGroupVariance,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            epochs: 200,
            patience: 30,
            batch_size: 1,
            seed: 0,
            dims: Dims::default(),
            use_group_tokens: true,
            cv_folds: 3,
            val_fraction: 0.2,
        }
    }
}

impl RunConfig {
    /// Plain attention-MIL: no masking, no group tokens, one pseudo-bag and
    /// both regularizer weights at zero.
    pub fn baseline() -> Self {
        Self {
            strategy: MaskStrategy::None,
            use_group_tokens: false,
            m: 1,
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("mr_target", self.mr_target),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", self.lr),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
            ("weight_decay", self.weight_decay),
            ("val_fraction", self.val_fraction),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be finite")));
        }
        let problem = if self.batch_size != 1 {
            Some("batch_size must be 1")
        } else if !(0.0..=1.0).contains(&self.mr_target) {
            Some("mr_target must be in [0, 1]")
        } else if self.m == 0 {
            Some("m must be at least 1")
        } else if self.lr < 0.0 || self.weight_decay < 0.0 {
            Some("lr and weight_decay must be non-negative")
        } else if self.adam_eps <= 0.0 {
            Some("adam_eps must be positive")
        } else if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            Some("adam betas must be in [0, 1)")
        } else if self.epochs == 0 {
            Some("epochs must be positive")
        } else if self.cv_folds < 2 {
            Some("cv_folds must be at least 2")
        } else if !(0.0..1.0).contains(&self.val_fraction) {
            Some("val_fraction must be in [0, 1)")
        } else {
            None
        };
        if let Some(msg) = problem {
            return Err(Error::invalid(msg));
        }
        self.ratio_fn.validate()?;
        self.dims.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m1: ModelParams,
    pub m2: ModelParams,
}

impl AdamState {
    pub fn new(dims: Dims) -> Self {
        Self {
            step: 0,
            m1: ModelParams::zeros(dims),
            m2: ModelParams::zeros(dims),
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != state.m1.dims() {
        return Err(Error::ShapeMismatch(
            "adam: parameter, gradient and state shapes differ".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - cfg.beta1.powi(t);
    let correction2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.blocks();
    let m1 = state.m1.blocks_mut();
    let m2 = state.m2.blocks_mut();
    for ((((_, theta), (_, g)), (_, m)), (_, v)) in
        params.blocks_mut().into_iter().zip(grads).zip(m1).zip(m2)
    {
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            let old = theta[i];
            theta[i] =
                old - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - cfg.lr * cfg.weight_decay * old;
        }
    }
    Ok(())
}

/// The token bag the network sees for `bag`, before masking.
pub fn token_bag(bag: &SlideBag, use_group_tokens: bool) -> Result<AugmentedBag> {
    if use_group_tokens {
        augment_bag(bag)
    } else {
        bag.ensure_valid()?;
        Ok(AugmentedBag::without_groups(bag))
    }
}

/// Everything stochastic about one training step, fixed in advance: the
/// mask, the pseudo-bag partition and the consistency grouping.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub masked: AugmentedBag,
    pub plan: MaskPlan,
    pub pseudo_bags: PseudoBagSet,
    pub consistency_ids: Vec<Option<u32>>,
}

pub fn prepare_step(bag: &SlideBag, cfg: &RunConfig, epoch_seed: u64) -> Result<PreparedStep> {
    let tokens = token_bag(bag, cfg.use_group_tokens)?;
    let plan = masking::plan(
        &tokens,
        cfg.strategy,
        &cfg.ratio_fn,
        cfg.mr_target,
        epoch_seed,
    )?;
    let masked = masking::apply_mask(&tokens, &plan)?;
    let m = cfg.m.min(masked.len());
    let pb_seed = derive_seed(epoch_seed, &["pseudo".into(), bag.slide_id.as_str().into()]);
    let pseudo_bags = pseudo_bags_for(&masked, m, pb_seed, cfg.remainder)?;
    let consistency_ids = consistency_ids(&masked);
    Ok(PreparedStep {
        masked,
        plan,
        pseudo_bags,
        consistency_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub pseudo: f64,
    pub consistency: f64,
    pub total: f64,
}

/// `cls + alpha * pseudo + beta * consistency` on a prepared step, with its
/// gradient. The consistency term reaches the parameters through the
/// attention weights only.
pub fn composite_loss(
    params: &ModelParams,
    tokens: &Array2<f64>,
    step: &PreparedStep,
    cfg: &RunConfig,
) -> Result<(LossParts, Gradients)> {
    let label = step.masked.label();
    let trace = forward(params, tokens)?;
    let cls = cross_entropy(&trace.logits, label)?;
    let (pseudo, pseudo_grads) = pseudo_bag_loss(params, tokens, &step.pseudo_bags)?;
    let (consistency, d_attn) =
        consistency_loss(&trace.attn, &step.consistency_ids, cfg.consistency_mode)?;

    let d_logits = cross_entropy_grad(&trace.logits, label, 1.0)?;
    let extra = (cfg.beta != 0.0).then(|| d_attn * cfg.beta);
    let mut grads = backward_from(params, &trace, &d_logits, extra.as_ref())?;
    if cfg.alpha != 0.0 {
        grads.model.add_scaled(&pseudo_grads.model, cfg.alpha);
        grads.tokens.scaled_add(cfg.alpha, &pseudo_grads.tokens);
    }
    let parts = LossParts {
        cls,
        pseudo,
        consistency,
        total: total_loss(cls, pseudo, consistency, cfg.alpha, cfg.beta),
    };
    Ok((parts, grads))
}

/// Value of [`composite_loss`] alone, for finite differences.
pub fn composite_value(
    params: &ModelParams,
    tokens: &Array2<f64>,
    step: &PreparedStep,
    cfg: &RunConfig,
) -> Result<f64> {
    let label = step.masked.label();
    let trace = forward(params, tokens)?;
    let cls = cross_entropy(&trace.logits, label)?;
    let (pseudo, _) = pseudo_bag_loss(params, tokens, &step.pseudo_bags)?;
    let (consistency, _) =
        consistency_loss(&trace.attn, &step.consistency_ids, cfg.consistency_mode)?;
    Ok(total_loss(cls, pseudo, consistency, cfg.alpha, cfg.beta))
}

/// Finite-difference check of [`composite_loss`] at a random initialization
/// on a random segmented bag of `n_instances`. With `corrupt`, one analytic
/// entry is perturbed first, so the check is expected to fail.
pub fn check_composite_gradient(
    cfg: &RunConfig,
    n_instances: usize,
    seed: u64,
    h: f64,
    tolerance: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    if n_instances == 0 {
        return Err(Error::invalid("gradient check needs at least one instance"));
    }
    let mut r = rng::stream(seed, &["gradcheck".into()]);
    let d_in = cfg.dims.d_in;
    let features = Array2::from_shape_fn((n_instances, d_in), |_| r.gen_range(-2.0f32..2.0));
    let segment_of: Vec<Option<u32>> = (0..n_instances)
        .map(|i| {
            if i % 4 == 3 {
                None
            } else {
                Some((i % 3) as u32 + 1)
            }
        })
        .collect();
    let segment_areas = segment_of
        .iter()
        .flatten()
        .map(|&s| (s, r.gen_range(1.0..100.0)))
        .collect();
    let bag = SlideBag {
        slide_id: format!("gradcheck_{seed}"),
        label: (seed % cfg.dims.c as u64) as usize,
        features,
        segment_of,
        segment_areas,
        coords: None,
    };
    let params = init_params(cfg.dims, seed)?;
    let step = prepare_step(&bag, cfg, seed)?;
    let tokens = step.masked.tokens().clone();
    let (_, mut grads) = composite_loss(&params, &tokens, &step, cfg)?;
    if corrupt {
        let g = &mut grads.model.w_proj[[0, 0]];
        *g += 1e-2 * (1.0 + g.abs());
    }
    compare_gradients(
        &params,
        &tokens,
        &grads,
        |p, t| composite_value(p, t, &step, cfg),
        h,
        tolerance,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub slide_id: String,
    pub cls: f64,
    pub pseudo: f64,
    pub consistency: f64,
    pub total: f64,
    pub retained: usize,
    pub masked: usize,
    pub per_group: Vec<GroupMask>,
}

/// One optimization step on one slide. Returns the report and the mask plan
/// that was applied.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    bag: &SlideBag,
    cfg: &RunConfig,
    epoch_seed: u64,
) -> Result<(StepReport, MaskPlan)> {
    let step = prepare_step(bag, cfg, epoch_seed)?;
    let (loss, grads) = composite_loss(params, step.masked.tokens(), &step, cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss on slide {}",
            bag.slide_id
        )));
    }
    adam_step(params, &grads.model, state, &cfg.adam())?;
    if !params.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters diverged on slide {}",
            bag.slide_id
        )));
    }
    let report = StepReport {
        slide_id: bag.slide_id.clone(),
        cls: loss.cls,
        pseudo: loss.pseudo,
        consistency: loss.consistency,
        total: loss.total,
        retained: step.plan.retained().len(),
        masked: step.plan.masked().len(),
        per_group: step.plan.per_group().to_vec(),
    };
    Ok((report, step.plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    pub loss: f64,
    /// Attention weight of every unmasked token, ordinary tokens first.
    pub attention: Vec<f64>,
}

/// Inference without masking. Slides are scored in parallel; results keep
/// the input order.
pub fn predict(
    params: &ModelParams,
    bags: &[SlideBag],
    use_group_tokens: bool,
) -> Result<Vec<SlidePrediction>> {
    bags.par_iter()
        .map(|bag| {
            let tokens = token_bag(bag, use_group_tokens)?;
            let trace = forward(params, tokens.tokens())?;
            Ok(SlidePrediction {
                slide_id: bag.slide_id.clone(),
                label: bag.label,
                probs: softmax(trace.logits.view()).to_vec(),
                loss: cross_entropy(&trace.logits, bag.label)?,
                attention: trace.attn.to_vec(),
            })
        })
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    bags: &[SlideBag],
    use_group_tokens: bool,
) -> Result<EvalResult> {
    let preds = predict(params, bags, use_group_tokens)?;
    metrics_of(&preds)
}

pub fn metrics_of(preds: &[SlidePrediction]) -> Result<EvalResult> {
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    evaluate_probabilities(&probs, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    pub pseudo: f64,
    pub consistency: f64,
    pub total: f64,
    /// `None` when the validation split holds a single class.
    pub val_auc: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub stop_epoch: usize,
    pub steps: u64,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct FitResult {
    pub best_params: ModelParams,
    pub best_step: u64,
    pub report: TrainReport,
}

/// Receives every mask plan applied during training.
pub type MaskSink<'a> = &'a mut dyn FnMut(usize, &MaskPlan) -> Result<()>;

/// Trains on `train`, early-stopping on `val`. Epochs are ranked by
/// validation AUC, then by lower validation loss; a single-class `val`
/// ranks by loss alone.
pub fn fit(
    train: &[SlideBag],
    val: &[SlideBag],
    cfg: &RunConfig,
    mut mask_sink: Option<MaskSink<'_>>,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training slides"));
    }
    if val.is_empty() {
        return Err(Error::invalid("empty validation split"));
    }
    if let Some(b) = train
        .iter()
        .chain(val)
        .find(|b| b.feature_dim() != cfg.dims.d_in)
    {
        return Err(Error::ShapeMismatch(format!(
            "slide {} has {} features, config expects d_in = {}",
            b.slide_id,
            b.feature_dim(),
            cfg.dims.d_in
        )));
    }

    let mut params = init_params(cfg.dims, cfg.seed)?;
    let mut state = AdamState::new(cfg.dims);
    let mut best_params = params.clone();
    let mut best_step = 0;
    let mut best_monitor: Option<(f64, f64)> = None;
    let mut best_epoch = 0;
    let mut best_val_auc = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, &["epoch".into(), (epoch as u64).into()]);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(epoch_seed, &["order".into()]));

        let mut sums = [0.0f64; 4];
        for &i in &order {
            let (report, plan) = train_step(&mut params, &mut state, &train[i], cfg, epoch_seed)?;
            if let Some(sink) = mask_sink.as_mut() {
                sink(epoch, &plan)?;
            }
            sums[0] += report.cls;
            sums[1] += report.pseudo;
            sums[2] += report.consistency;
            sums[3] += report.total;
        }
        let n = train.len() as f64;

        let preds = predict(&params, val, cfg.use_group_tokens)?;
        let val_loss = preds.iter().map(|p| p.loss).sum::<f64>() / preds.len() as f64;
        let val_auc = match metrics_of(&preds) {
            Ok(r) => Some(r.auc),
            Err(Error::AucUndefined) => None,
            Err(e) => return Err(e),
        };
        epochs.push(EpochRecord {
            epoch,
            cls: sums[0] / n,
            pseudo: sums[1] / n,
            consistency: sums[2] / n,
            total: sums[3] / n,
            val_auc,
            val_loss,
        });

        let monitor = (val_auc.unwrap_or(f64::NEG_INFINITY), -val_loss);
        let improved = match best_monitor {
            None => !val_loss.is_nan(),
            Some(best) => monitor.partial_cmp(&best) == Some(std::cmp::Ordering::Greater),
        };
        if improved {
            best_monitor = Some(monitor);
            best_params = params.clone();
            best_step = state.step;
            best_epoch = epoch;
            best_val_auc = val_auc;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    let stop_epoch = epochs.last().map_or(0, |e| e.epoch);
    Ok(FitResult {
        best_params,
        best_step,
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_auc,
            stop_epoch,
            steps: state.step,
            best_checkpoint: None,
        },
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MASKS_FILE: &str = "masks.jsonl";

pub fn write_metrics_csv(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "cls", "pseudo", "consistency", "total", "val_auc"])
        .map_err(csv_err)?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.cls.to_string(),
            e.pseudo.to_string(),
            e.consistency.to_string(),
            e.total.to_string(),
            e.val_auc.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// [`fit`] plus its artifacts in `out_dir`: the best checkpoint, the
/// per-epoch metrics CSV, the report JSON and, with `dump_masks`, every
/// mask plan as JSON lines.
pub fn train(
    train_bags: &[SlideBag],
    val_bags: &[SlideBag],
    cfg: &RunConfig,
    out_dir: &Path,
    dump_masks: bool,
) -> Result<(TrainReport, ModelParams)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let masks_path = out_dir.join(MASKS_FILE);
    let mut masks_out = if dump_masks {
        let f = fs::File::create(&masks_path).map_err(|e| Error::io(&masks_path, e))?;
        Some(std::io::BufWriter::new(f))
    } else {
        None
    };
    let mut sink = |epoch: usize, plan: &MaskPlan| -> Result<()> {
        if let Some(out) = masks_out.as_mut() {
            #[derive(Serialize)]
            struct Line<'a> {
                epoch: usize,
                plan: &'a MaskPlan,
            }
            serde_json::to_writer(&mut *out, &Line { epoch, plan })
                .map_err(|e| Error::json(&masks_path, e))?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(&masks_path, e))?;
        }
        Ok(())
    };
    let mut result = fit(train_bags, val_bags, cfg, Some(&mut sink))?;
    if let Some(mut out) = masks_out {
        out.flush().map_err(|e| Error::io(&masks_path, e))?;
    }

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let header = CheckpointHeader {
        dims: cfg.dims,
        seed: cfg.seed,
        step: result.best_step,
        use_group_tokens: cfg.use_group_tokens,
        blocks: BLOCK_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    save_checkpoint(&ckpt, &result.best_params, &header)?;
    result.report.best_checkpoint = Some(PathBuf::from(CHECKPOINT_FILE));
    write_metrics_csv(&out_dir.join(METRICS_FILE), &result.report.epochs)?;
    write_json(&out_dir.join(REPORT_FILE), &result.report)?;
    Ok((result.report, result.best_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::backward;
    use approx::assert_abs_diff_eq;

    fn tiny_dims() -> Dims {
        Dims {
            d_in: 4,
            d: 6,
            h: 3,
            c: 2,
        }
    }

    fn toy_bag(id: &str, label: usize, shift: f32) -> SlideBag {
        let n = 6;
        SlideBag {
            slide_id: id.into(),
            label,
            features: Array2::from_shape_fn((n, 4), |(r, c)| {
                ((r * 4 + c) as f32 * 0.37).sin() * 0.3 + if c == 0 { shift } else { 0.0 }
            }),
            segment_of: vec![Some(1), Some(1), Some(1), Some(2), Some(2), None],
            segment_areas: [(1, 300.0), (2, 100.0)].into_iter().collect(),
            coords: None,
        }
    }

    #[test]
    fn first_adam_step_closed_form() {
        let dims = Dims {
            d_in: 1,
            d: 1,
            h: 1,
            c: 1,
        };
        let mut p = ModelParams::zeros(dims);
        let mut g = ModelParams::zeros(dims);
        g.w_proj[[0, 0]] = 1.0;
        let mut s = AdamState::new(dims);
        let cfg = AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_abs_diff_eq!(p.w_proj[[0, 0]], -0.001 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_eq!(s.step, 1);
        // Zero-gradient entries stay put.
        assert_eq!(p.v[[0, 0]], 0.0);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let dims = tiny_dims();
        let p0 = init_params(dims, 3).unwrap();
        let mut p = p0.clone();
        let mut s = AdamState::new(dims);
        let cfg = RunConfig {
            weight_decay: 0.0,
            ..RunConfig::default()
        }
        .adam();
        adam_step(&mut p, &ModelParams::zeros(dims), &mut s, &cfg).unwrap();
        assert_eq!(p, p0);

        let mut g = init_params(dims, 4).unwrap();
        g.b_cls.fill(0.3);
        let cfg = AdamConfig { lr: 0.0, ..cfg };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p, p0);
        assert_eq!(s.step, 2);
        assert!(s
            .m2
            .blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| *v >= 0.0)));
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = ModelParams::zeros(tiny_dims());
        let g = ModelParams::zeros(Dims {
            d: 2,
            ..tiny_dims()
        });
        let mut s = AdamState::new(tiny_dims());
        assert!(adam_step(&mut p, &g, &mut s, &RunConfig::default().adam()).is_err());
    }

    #[test]
    fn baseline_step_reduces_to_cross_entropy() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            ..RunConfig::baseline()
        };
        let bag = toy_bag("a", 1, 1.0);
        let mut params = init_params(cfg.dims, 5).unwrap();
        let direct_params = params.clone();
        let mut state = AdamState::new(cfg.dims);
        let (report, plan) = train_step(&mut params, &mut state, &bag, &cfg, 11).unwrap();
        let tokens = bag.features.mapv(f64::from);
        let trace = forward(&direct_params, &tokens).unwrap();
        let ce = cross_entropy(&trace.logits, 1).unwrap();
        assert_eq!(report.total.to_bits(), report.cls.to_bits());
        assert_eq!(report.cls.to_bits(), ce.to_bits());
        assert!(plan.masked().is_empty());

        // Same update as a hand-driven backward + Adam step.
        let grads = backward(&direct_params, &trace, 1, 1.0).unwrap();
        let mut manual = direct_params.clone();
        let mut manual_state = AdamState::new(cfg.dims);
        adam_step(&mut manual, &grads.model, &mut manual_state, &cfg.adam()).unwrap();
        assert_eq!(manual, params);
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            m: 2,
            ..RunConfig::default()
        };
        let bag = toy_bag("a", 0, 0.0);
        let run = || {
            let mut p = init_params(cfg.dims, 5).unwrap();
            let mut s = AdamState::new(cfg.dims);
            let r = train_step(&mut p, &mut s, &bag, &cfg, 99).unwrap();
            (r, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            m: 2,
            alpha: 0.7,
            beta: 3.0,
            ..RunConfig::default()
        };
        let bag = toy_bag("g", 1, 0.5);
        let params = init_params(cfg.dims, 8).unwrap();
        let step = prepare_step(&bag, &cfg, 1).unwrap();
        let tokens = step.masked.tokens().clone();
        let (_, grads) = composite_loss(&params, &tokens, &step, &cfg).unwrap();
        let report = compare_gradients(
            &params,
            &tokens,
            &grads,
            |p, t| composite_value(p, t, &step, &cfg),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn composite_check_passes_and_catches_corruption() {
        let cfg = RunConfig {
            dims: Dims {
                d_in: 6,
                d: 5,
                h: 3,
                c: 2,
            },
            ..RunConfig::default()
        };
        assert!(
            check_composite_gradient(&cfg, 10, 3, 1e-5, 1e-4, false)
                .unwrap()
                .passed
        );
        let bad = check_composite_gradient(&cfg, 10, 3, 1e-5, 1e-4, true).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.failing_blocks(), vec!["w_proj"]);
        assert!(check_composite_gradient(&cfg, 10, 3, 0.0, 1e-4, false).is_err());
    }

    #[test]
    fn pseudo_bag_count_is_clamped_to_tokens() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            m: 50,
            ..RunConfig::default()
        };
        let step = prepare_step(&toy_bag("c", 0, 0.0), &cfg, 0).unwrap();
        assert_eq!(step.pseudo_bags.m(), step.masked.len());
    }

    fn toy_split() -> (Vec<SlideBag>, Vec<SlideBag>) {
        let train = vec![toy_bag("p0", 1, 2.0), toy_bag("n0", 0, -2.0)];
        let val = vec![toy_bag("p1", 1, 1.8), toy_bag("n1", 0, -1.8)];
        (train, val)
    }

    #[test]
    fn loss_drops_on_separable_pair() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            lr: 0.01,
            ..RunConfig::baseline()
        };
        let (train, _) = toy_split();
        let mut p = init_params(cfg.dims, 1).unwrap();
        let mut s = AdamState::new(cfg.dims);
        let initial: f64 = train
            .iter()
            .map(|b| {
                cross_entropy(
                    &forward(&p, &b.features.mapv(f64::from)).unwrap().logits,
                    b.label,
                )
                .unwrap()
            })
            .sum();
        for step in 0..200 {
            let bag = &train[step % 2];
            train_step(&mut p, &mut s, bag, &cfg, step as u64).unwrap();
        }
        let after: f64 = train
            .iter()
            .map(|b| {
                cross_entropy(
                    &forward(&p, &b.features.mapv(f64::from)).unwrap().logits,
                    b.label,
                )
                .unwrap()
            })
            .sum();
        assert!(after < 0.1 * initial, "{initial} -> {after}");
    }

    #[test]
    fn single_epoch_runs_once() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            epochs: 1,
            patience: 100,
            ..RunConfig::default()
        };
        let (train, val) = toy_split();
        let r = fit(&train, &val, &cfg, None).unwrap();
        assert_eq!(r.report.epochs.len(), 1);
        assert_eq!(r.report.stop_epoch, 0);
    }

    #[test]
    fn zero_patience_stops_at_first_stall() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            epochs: 50,
            patience: 0,
            lr: 0.05,
            ..RunConfig::default()
        };
        let (train, mut val) = toy_split();
        // Flipped validation labels: fitting the training set makes them worse.
        for b in &mut val {
            b.label = 1 - b.label;
        }
        let r = fit(&train, &val, &cfg, None).unwrap();
        let e = &r.report.epochs;
        let key = |x: &EpochRecord| (x.val_auc.unwrap_or(f64::NEG_INFINITY), -x.val_loss);
        let last = e.len() - 1;
        assert!(last < 49, "never stalled");
        for i in 1..last {
            assert!(key(&e[i]) > key(&e[i - 1]), "epoch {i} did not improve");
        }
        assert!(key(&e[last]) <= key(&e[last - 1]));
        assert_eq!(r.report.best_epoch, last - 1);
    }

    #[test]
    fn fit_is_deterministic_and_checks_inputs() {
        let cfg = RunConfig {
            dims: tiny_dims(),
            epochs: 3,
            ..RunConfig::default()
        };
        let (train, val) = toy_split();
        let a = fit(&train, &val, &cfg, None).unwrap();
        let b = fit(&train, &val, &cfg, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.best_params, b.best_params);
        assert!(fit(&train, &[], &cfg, None).is_err());
        let wrong = RunConfig {
            dims: Dims {
                d_in: 5,
                ..tiny_dims()
            },
            ..cfg
        };
        assert!(fit(&train, &val, &wrong, None).is_err());
    }

    #[test]
    fn config_round_trips_with_every_field() {
        let cfg = RunConfig::default();
        let json = serde_json::to_value(&cfg).unwrap();
        for key in [
            "strategy",
            "ratio_fn",
            "mr_target",
            "m",
            "alpha",
            "beta",
            "lr",
            "patience",
            "use_group_tokens",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let back: RunConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"alpha": 0.25}"#).unwrap();
        assert_eq!(partial.alpha, 0.25);
        assert!(serde_json::from_str::<RunConfig>(r#"{"alpah": 0.25}"#).is_err());
        assert!(RunConfig {
            batch_size: 2,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
    }
}
