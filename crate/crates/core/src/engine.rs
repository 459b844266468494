//! Attention-pooling MIL network with a hand-derived backward pass.
//!
//! ```text
//! projected = relu(tokens · W_proj + b_proj)        N' x D
//! pre_attn  = tanh(projected · V) · w               N'
//! attn      = softmax(pre_attn)                     N'
//! embedding = attnᵀ · projected                     D
//! logits    = embedding · W_cls + b_cls             C
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_in: usize,
    pub d: usize,
    pub h: usize,
    pub c: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_in: 1024,
            d: 512,
            h: 128,
            c: 2,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.h == 0 || self.c == 0 {
            return Err(Error::invalid(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Trainable tensors. Also used, co-shaped, for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    pub v: Array2<f64>,
    pub w: Array1<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

pub const BLOCK_NAMES: [&str; 6] = ["w_proj", "b_proj", "v", "w", "w_cls", "b_cls"];

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w_proj: Array2::zeros((dims.d_in, dims.d)),
            b_proj: Array1::zeros(dims.d),
            v: Array2::zeros((dims.d, dims.h)),
            w: Array1::zeros(dims.h),
            w_cls: Array2::zeros((dims.d, dims.c)),
            b_cls: Array1::zeros(dims.c),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_in: self.w_proj.nrows(),
            d: self.w_proj.ncols(),
            h: self.v.ncols(),
            c: self.w_cls.ncols(),
        }
    }

    /// Parameter blocks in checkpoint order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 6] {
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("parameters are contiguous")
        }
        [
            (BLOCK_NAMES[0], s(self.w_proj.as_slice())),
            (BLOCK_NAMES[1], s(self.b_proj.as_slice())),
            (BLOCK_NAMES[2], s(self.v.as_slice())),
            (BLOCK_NAMES[3], s(self.w.as_slice())),
            (BLOCK_NAMES[4], s(self.w_cls.as_slice())),
            (BLOCK_NAMES[5], s(self.b_cls.as_slice())),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        fn s(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("parameters are contiguous")
        }
        [
            (BLOCK_NAMES[0], s(self.w_proj.as_slice_mut())),
            (BLOCK_NAMES[1], s(self.b_proj.as_slice_mut())),
            (BLOCK_NAMES[2], s(self.v.as_slice_mut())),
            (BLOCK_NAMES[3], s(self.w.as_slice_mut())),
            (BLOCK_NAMES[4], s(self.w_cls.as_slice_mut())),
            (BLOCK_NAMES[5], s(self.b_cls.as_slice_mut())),
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        self.w_proj.scaled_add(scale, &other.w_proj);
        self.b_proj.scaled_add(scale, &other.b_proj);
        self.v.scaled_add(scale, &other.v);
        self.w.scaled_add(scale, &other.w);
        self.w_cls.scaled_add(scale, &other.w_cls);
        self.b_cls.scaled_add(scale, &other.b_cls);
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: Dims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut p = ModelParams::zeros(dims);
    let fill = |name: &str, block: &mut [f64], fan_in: usize, fan_out: usize| {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng::stream(seed, &["init".into(), name.into()]);
        for x in block.iter_mut() {
            *x = r.gen_range(-s..s);
        }
    };
    fill(
        "w_proj",
        p.w_proj.as_slice_mut().unwrap(),
        dims.d_in,
        dims.d,
    );
    fill("v", p.v.as_slice_mut().unwrap(), dims.d, dims.h);
    fill("w", p.w.as_slice_mut().unwrap(), dims.h, 1);
    fill("w_cls", p.w_cls.as_slice_mut().unwrap(), dims.d, dims.c);
    Ok(p)
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Array2<f64>,
    /// Pre-activation of the projection (before relu).
    pub pre_proj: Array2<f64>,
    pub projected: Array2<f64>,
    /// `tanh(projected · V)`.
    pub hidden: Array2<f64>,
    pub pre_attn: Array1<f64>,
    pub attn: Array1<f64>,
    pub bag_embedding: Array1<f64>,
    pub logits: Array1<f64>,
}

pub fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e = x.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

pub fn forward(params: &ModelParams, tokens: &Array2<f64>) -> Result<ForwardTrace> {
    let dims = params.dims();
    if tokens.nrows() == 0 {
        return Err(Error::ShapeMismatch(
            "forward needs at least one token".into(),
        ));
    }
    if tokens.ncols() != dims.d_in {
        return Err(Error::ShapeMismatch(format!(
            "tokens have {} features, model expects {}",
            tokens.ncols(),
            dims.d_in
        )));
    }
    let pre_proj = tokens.dot(&params.w_proj) + &params.b_proj;
    let projected = pre_proj.mapv(|v| v.max(0.0));
    let hidden = projected.dot(&params.v).mapv(f64::tanh);
    let pre_attn = hidden.dot(&params.w);
    let attn = softmax(pre_attn.view());
    let bag_embedding = attn.dot(&projected);
    let logits = bag_embedding.dot(&params.w_cls) + &params.b_cls;
    Ok(ForwardTrace {
        inputs: tokens.clone(),
        pre_proj,
        projected,
        hidden,
        pre_attn,
        attn,
        bag_embedding,
        logits,
    })
}

fn check_label(logits: &Array1<f64>, label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok((max - logits[label]) + sum.ln())
}

/// Gradient of `upstream_scale * cross_entropy` with respect to the logits.
pub fn cross_entropy_grad(
    logits: &Array1<f64>,
    label: usize,
    upstream_scale: f64,
) -> Result<Array1<f64>> {
    check_label(logits, label)?;
    let mut g = softmax(logits.view());
    g[label] -= 1.0;
    g *= upstream_scale;
    Ok(g)
}

/// Gradients co-shaped with [`ModelParams`], plus the gradient with respect
/// to the input tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub model: ModelParams,
    pub tokens: Array2<f64>,
}

impl Gradients {
    pub fn zeros(dims: Dims, n_tokens: usize) -> Self {
        Self {
            model: ModelParams::zeros(dims),
            tokens: Array2::zeros((n_tokens, dims.d_in)),
        }
    }
}

fn check_trace(params: &ModelParams, trace: &ForwardTrace) -> Result<()> {
    let dims = params.dims();
    let n = trace.inputs.nrows();
    let ok = trace.inputs.ncols() == dims.d_in
        && trace.projected.dim() == (n, dims.d)
        && trace.hidden.dim() == (n, dims.h)
        && trace.attn.len() == n
        && trace.logits.len() == dims.c;
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(
            "trace does not match the parameters".into(),
        ))
    }
}

/// Backpropagates an arbitrary upstream gradient on the logits, plus an
/// optional gradient arriving directly on the attention weights.
pub fn backward_from(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_logits: &Array1<f64>,
    d_attn_extra: Option<&Array1<f64>>,
) -> Result<Gradients> {
    check_trace(params, trace)?;
    let n = trace.attn.len();
    if let Some(extra) = d_attn_extra {
        if extra.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "attention gradient has {} entries for {n} tokens",
                extra.len()
            )));
        }
    }

    fn col(a: &Array1<f64>) -> ArrayView2<'_, f64> {
        a.view().insert_axis(Axis(1))
    }
    fn row(a: &Array1<f64>) -> ArrayView2<'_, f64> {
        a.view().insert_axis(Axis(0))
    }

    let d_w_cls = col(&trace.bag_embedding).dot(&row(d_logits));
    let d_b_cls = d_logits.clone();
    let d_embedding = params.w_cls.dot(d_logits);

    let mut d_attn = trace.projected.dot(&d_embedding);
    if let Some(extra) = d_attn_extra {
        d_attn += extra;
    }
    // Softmax Jacobian: d_s = a ⊙ (d_a - <a, d_a>).
    let mean = trace.attn.dot(&d_attn);
    let d_pre_attn = &trace.attn * &(d_attn - mean);

    let d_w = trace.hidden.t().dot(&d_pre_attn);
    let tanh_grad = trace.hidden.mapv(|t| 1.0 - t * t);
    let d_hidden_pre = col(&d_pre_attn).dot(&row(&params.w)) * tanh_grad;
    let d_v = trace.projected.t().dot(&d_hidden_pre);

    let mut d_projected = col(&trace.attn).dot(&row(&d_embedding));
    d_projected += &d_hidden_pre.dot(&params.v.t());
    let mask = trace.pre_proj.mapv(|p| if p > 0.0 { 1.0 } else { 0.0 });
    let d_pre_proj = d_projected * mask;

    let d_w_proj = trace.inputs.t().dot(&d_pre_proj);
    let d_b_proj = d_pre_proj.sum_axis(Axis(0));
    let d_tokens = d_pre_proj.dot(&params.w_proj.t());

    Ok(Gradients {
        model: ModelParams {
            w_proj: row_major(d_w_proj),
            b_proj: d_b_proj,
            v: row_major(d_v),
            w: d_w,
            w_cls: row_major(d_w_cls),
            b_cls: d_b_cls,
        },
        tokens: row_major(d_tokens),
    })
}

fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Exact gradient of `upstream_scale * cross_entropy(logits, label)`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    label: usize,
    upstream_scale: f64,
) -> Result<Gradients> {
    let d_logits = cross_entropy_grad(&trace.logits, label, upstream_scale)?;
    backward_from(params, trace, &d_logits, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_error.is_nan() || b.max_rel_error >= self.tolerance)
            .map(|b| b.block.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn block_error(name: &str, analytic: &[f64], numeric: impl Iterator<Item = f64>) -> BlockError {
    let mut worst = BlockError {
        block: name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, n);
        if e > worst.max_rel_error || e.is_nan() {
            worst = BlockError {
                block: name.to_string(),
                max_rel_error: if e.is_nan() { f64::INFINITY } else { e },
                worst_index: i,
                analytic: *a,
                numeric: n,
            };
        }
    }
    worst
}

fn check_step(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    Ok(())
}

/// Compares `analytic` with central differences of `objective` over every
/// scalar parameter, and optionally over the input tokens.
pub fn compare_gradients<F>(
    params: &ModelParams,
    tokens: &Array2<f64>,
    analytic: &Gradients,
    objective: F,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams, &Array2<f64>) -> Result<f64>,
{
    check_step(h)?;
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(7);
    for (b, name) in BLOCK_NAMES.iter().enumerate() {
        let len = probe.blocks()[b].1.len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = probe.blocks()[b].1[i];
            probe.blocks_mut()[b].1[i] = orig + h;
            let plus = objective(&probe, tokens)?;
            probe.blocks_mut()[b].1[i] = orig - h;
            let minus = objective(&probe, tokens)?;
            probe.blocks_mut()[b].1[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        blocks.push(block_error(
            name,
            analytic.model.blocks()[b].1,
            numeric.into_iter(),
        ));
    }

    let mut probe_tokens = tokens.clone();
    let mut numeric = Vec::with_capacity(tokens.len());
    for idx in ndarray::indices(tokens.dim()) {
        let orig = probe_tokens[idx];
        probe_tokens[idx] = orig + h;
        let plus = objective(params, &probe_tokens)?;
        probe_tokens[idx] = orig - h;
        let minus = objective(params, &probe_tokens)?;
        probe_tokens[idx] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let analytic_tokens: Vec<f64> = analytic.tokens.iter().copied().collect();
    blocks.push(block_error("tokens", &analytic_tokens, numeric.into_iter()));

    let passed = blocks.iter().all(|b| b.max_rel_error < tolerance);
    Ok(GradCheckReport {
        h,
        tolerance,
        blocks,
        passed,
    })
}

/// Finite-difference check of the cross-entropy backward pass.
pub fn grad_check(
    params: &ModelParams,
    tokens: &Array2<f64>,
    label: usize,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    check_step(h)?;
    let trace = forward(params, tokens)?;
    let analytic = backward(params, &trace, label, 1.0)?;
    compare_gradients(
        params,
        tokens,
        &analytic,
        |p, t| cross_entropy(&forward(p, t)?.logits, label),
        h,
        tolerance,
    )
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SMILCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: Dims,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub use_group_tokens: bool,
    /// Block names in file order.
    pub blocks: Vec<String>,
}

/// Layout: 8-byte magic, `u64` little-endian header length, JSON header,
/// then every parameter block as little-endian `f64`, row-major, in
/// [`BLOCK_NAMES`] order.
pub fn save_checkpoint(path: &Path, params: &ModelParams, header: &CheckpointHeader) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::json(path, e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, block) in params.blocks() {
        for v in block {
            write(&v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Malformed(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| Error::json(path, e))?;
    header.dims.validate()?;
    let mut params = ModelParams::zeros(header.dims);
    let expected = params.len() * 8;
    let body = &bytes[body_start..];
    if body.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: body.len() as u64,
        });
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (_, block) in params.blocks_mut() {
        for slot in block.iter_mut() {
            *slot = values.next().unwrap();
        }
    }
    Ok((header, params))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub fn small_dims() -> Dims {
        Dims {
            d_in: 16,
            d: 8,
            h: 4,
            c: 2,
        }
    }

    pub fn random_tokens(n: usize, d_in: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &["tokens".into()]);
        Array2::from_shape_fn((n, d_in), |_| StandardNormal.sample(&mut r))
    }
}
