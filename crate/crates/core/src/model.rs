//! Regression model with a mean head and a covariance head.
//!
//! The network has two branches over the same input. The mean branch is a
//! tanh MLP plus a linear skip path and emits `k` outputs; the covariance
//! branch is a tanh MLP that emits `k` log-variances `s` followed by
//! `k(k−1)/2` correlation logits `r`. Keeping the branches separate means
//! covariance tuning can leave the mean predictions untouched.
//!
//! Inputs are standardized and outputs de-standardized inside the forward
//! pass, so callers always work in physical units.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backend::{Backend, Plain};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::Rng;

pub const MODEL_FORMAT: &str = "covfilt-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    /// Variances and correlations.
    Full,
    /// Variances only; correlation logits are ignored.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    /// Apply dropout in the covariance branch as well as the mean branch.
    #[serde(default)]
    pub cov_dropout: bool,
    pub rho_scale: f64,
    pub covariance: CovarianceKind,
}

impl ModelConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: vec![64, 64],
            dropout_rate: 0.0,
            cov_dropout: false,
            rho_scale: 0.99,
            covariance: CovarianceKind::Full,
        }
    }

    pub fn corr_dim(&self) -> usize {
        linalg::offdiag_len(self.output_dim)
    }

    /// Width of the concatenated output layer: mean, log-variances,
    /// correlation logits.
    pub fn output_width(&self) -> usize {
        2 * self.output_dim + self.corr_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !(self.rho_scale > 0.0 && self.rho_scale <= 1.0) {
            return Err(Error::invalid(format!("rho_scale {} not in (0, 1]", self.rho_scale)));
        }
        Ok(())
    }
}

/// Affine layer `y = x·W + b`, `W` stored `in × out`, `b` as `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<M = Matrix> {
    pub weight: M,
    pub bias: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<M = Matrix> {
    pub hidden: Vec<Dense<M>>,
    pub output: Dense<M>,
    /// Optional `in × out` linear path from the (standardized) input.
    pub skip: Option<M>,
}

impl<M> Branch<M> {
    pub fn flat(&self) -> Vec<&M> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        if let Some(s) = &self.skip {
            out.push(s);
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut M> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        if let Some(s) = &mut self.skip {
            out.push(s);
        }
        out
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("{prefix}.hidden{i}.weight"));
            out.push(format!("{prefix}.hidden{i}.bias"));
        }
        out.push(format!("{prefix}.output.weight"));
        out.push(format!("{prefix}.output.bias"));
        if self.skip.is_some() {
            out.push(format!("{prefix}.skip"));
        }
        out
    }

    pub fn try_map<N>(&self, f: &mut impl FnMut(&M) -> Result<N>) -> Result<Branch<N>> {
        let hidden = self
            .hidden
            .iter()
            .map(|l| Ok(Dense { weight: f(&l.weight)?, bias: f(&l.bias)? }))
            .collect::<Result<Vec<_>>>()?;
        let output = Dense { weight: f(&self.output.weight)?, bias: f(&self.output.bias)? };
        let skip = self.skip.as_ref().map(&mut *f).transpose()?;
        Ok(Branch { hidden, output, skip })
    }
}

/// Per-feature affine standardization, `z = (v − offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Column means and population standard deviations (1 where a column
    /// is constant).
    pub fn fit(data: &Matrix) -> Self {
        let n = data.nrows().max(1) as f64;
        let mut offset = Vec::with_capacity(data.ncols());
        let mut scale = Vec::with_capacity(data.ncols());
        for c in 0..data.ncols() {
            let col = data.column(c);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            offset.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { offset, scale }
    }

    pub fn apply(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for c in 0..out.ncols() {
            for r in 0..out.nrows() {
                out[(r, c)] = (out[(r, c)] - self.offset[c]) / self.scale[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
    pub mean: Branch,
    pub cov: Branch,
}

/// Which parameter group receives gradients when lifted onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    Mean,
    Cov,
    None,
}

/// Bernoulli keep-masks (entries 0 or 1), one `rows × width` matrix per
/// hidden layer of each branch. A branch without masks runs with dropout off.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub mean: Option<Vec<Matrix>>,
    pub cov: Option<Vec<Matrix>>,
}

impl DropoutMasks {
    /// Keep only the masks of the branches `trainable` updates.
    pub fn restrict(mut self, trainable: Trainable) -> Self {
        if !matches!(trainable, Trainable::All | Trainable::Mean) {
            self.mean = None;
        }
        if !matches!(trainable, Trainable::All | Trainable::Cov) {
            self.cov = None;
        }
        self
    }
}

/// Raw head outputs in physical units: `mean` and `s` are `rows × k`, `r`
/// is `rows × k(k−1)/2`.
#[derive(Debug, Clone)]
pub struct HeadOutput<M> {
    pub mean: M,
    pub s: M,
    pub r: M,
}

/// Mean and covariance for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

/// Model parameters lifted onto a backend, in [`ModelParams::tensor_names`]
/// order.
pub struct Lifted<M> {
    pub mean: Branch<M>,
    pub cov: Branch<M>,
}

impl<M: Clone> Lifted<M> {
    pub fn flat(&self) -> Vec<M> {
        self.mean.flat().into_iter().chain(self.cov.flat()).cloned().collect()
    }
}

fn init_dense(rng: &mut Rng, fan_in: usize, fan_out: usize, std_scale: f64) -> Dense {
    let std = std_scale * (1.0 / fan_in as f64).sqrt();
    let weight = Matrix::from_fn(fan_in, fan_out, |_, _| std * rng.normal());
    Dense { weight, bias: Matrix::zeros(1, fan_out) }
}

fn init_branch(rng: &mut Rng, input: usize, hidden: &[usize], out: usize, out_scale: f64, skip: bool) -> Branch {
    let mut layers = Vec::new();
    let mut fan_in = input;
    for &h in hidden {
        layers.push(init_dense(rng, fan_in, h, 1.0));
        fan_in = h;
    }
    let output = init_dense(rng, fan_in, out, out_scale);
    Branch { hidden: layers, output, skip: skip.then(|| Matrix::zeros(input, out)) }
}

impl ModelParams {
    /// Fresh parameters. Hidden weights are drawn with variance `1/fan_in`;
    /// the mean head's output layer and skip path start at zero so the
    /// initial mean is the output offset.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let k = config.output_dim;
        let mean = init_branch(&mut rng, config.input_dim, &config.hidden, k, 0.0, true);
        let mut cov = init_branch(&mut rng, config.input_dim, &config.hidden, k + config.corr_dim(), 1.0, false);
        // Correlation logits start at zero, so the initial Σ is diagonal.
        cov.output.weight.columns_mut(k, config.corr_dim()).fill(0.0);
        Ok(Self {
            input_norm: Normalization::identity(config.input_dim),
            output_norm: Normalization::identity(k),
            config,
            mean,
            cov,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.mean.flat().into_iter().chain(self.cov.flat()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.mean.flat_mut();
        out.extend(self.cov.flat_mut());
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = self.mean.names("mean");
        out.extend(self.cov.names("cov"));
        out
    }

    /// Number of tensors that belong to the mean branch; they come first in
    /// [`ModelParams::tensors`].
    pub fn mean_tensor_count(&self) -> usize {
        self.mean.flat().len()
    }

    /// Fit input/output standardization to data and set the log-variance
    /// bias to the label variance.
    pub fn fit_normalization(&mut self, inputs: &Matrix, labels: &Matrix) {
        self.input_norm = Normalization::fit(inputs);
        self.output_norm = Normalization::fit(labels);
        let var: Vec<f64> = self.output_norm.scale.iter().map(|s| s * s).collect();
        self.set_variance_bias(&var);
    }

    /// Set the `s` output biases so that, with zero hidden contribution,
    /// the predicted variances equal `variances` (physical units), floored
    /// at 1e-12 of the squared output scale.
    pub fn set_variance_bias(&mut self, variances: &[f64]) {
        for (i, v) in variances.iter().enumerate() {
            let scale = self.output_norm.scale[i];
            self.cov.output.bias[(0, i)] = (v / (scale * scale)).max(1e-12).ln();
        }
    }

    /// Least-squares fit of the mean branch's skip path and output bias to
    /// `labels`, leaving the hidden contribution at its current value.
    pub fn warm_start_linear(&mut self, inputs: &Matrix, labels: &Matrix) -> Result<()> {
        let x = self.input_norm.apply(inputs);
        let y = self.output_norm.apply(labels);
        let n = x.nrows();
        let d = x.ncols();
        let mut design = Matrix::zeros(n, d + 1);
        design.view_mut((0, 0), (n, d)).copy_from(&x);
        design.column_mut(d).fill(1.0);
        let mut hidden_only = self.mean.clone();
        hidden_only.skip = None;
        let hidden_part = branch_forward(&mut Plain, &hidden_only, &x, None, 0.0, false)?;
        let target = y - hidden_part;
        let gram = design.transpose() * &design + Matrix::identity(d + 1, d + 1) * 1e-10;
        let rhs = design.transpose() * target;
        let (coef, _) = linalg::solve_spd(&linalg::symmetrize(&gram), &rhs)?;
        self.mean.skip = Some(coef.rows(0, d).into_owned());
        self.mean.output.bias = coef.rows(d, 1).into_owned();
        Ok(())
    }

    pub fn lift_plain(&self) -> Lifted<Matrix> {
        Lifted { mean: self.mean.clone(), cov: self.cov.clone() }
    }

    /// Put the parameters on a tape, as `param` nodes for the selected
    /// group and constants otherwise.
    pub fn lift(&self, tape: &mut Tape, trainable: Trainable) -> Result<Lifted<Var>> {
        let train_mean = matches!(trainable, Trainable::All | Trainable::Mean);
        let train_cov = matches!(trainable, Trainable::All | Trainable::Cov);
        let mean = self.mean.try_map(&mut |m| {
            if train_mean { tape.param(m.clone()) } else { tape.constant(m.clone()) }
        })?;
        let cov = self.cov.try_map(&mut |m| {
            if train_cov { tape.param(m.clone()) } else { tape.constant(m.clone()) }
        })?;
        Ok(Lifted { mean, cov })
    }

    /// Independent `Bernoulli(1 − dropout_rate)` keep-mask per hidden unit
    /// and row. Draw order: mean branch then covariance branch, layer by
    /// layer, row-major.
    pub fn sample_dropout_masks(&self, rows: usize, seed: u64) -> DropoutMasks {
        let mut rng = Rng::new(seed);
        self.sample_dropout_masks_with(rows, &mut rng)
    }

    pub fn sample_dropout_masks_with(&self, rows: usize, rng: &mut Rng) -> DropoutMasks {
        let keep = 1.0 - self.config.dropout_rate;
        let mut draw = |widths: &[usize]| -> Vec<Matrix> {
            widths
                .iter()
                .map(|&w| {
                    let mut m = Matrix::zeros(rows, w);
                    for r in 0..rows {
                        for c in 0..w {
                            m[(r, c)] = if rng.bernoulli(keep) { 1.0 } else { 0.0 };
                        }
                    }
                    m
                })
                .collect()
        };
        let mean = draw(&self.config.hidden);
        let cov = draw(&self.config.hidden);
        DropoutMasks { mean: Some(mean), cov: self.config.cov_dropout.then_some(cov) }
    }

    /// Forward pass on any backend. `inputs` is `rows × input_dim` in
    /// physical units. Without masks dropout is off.
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        lifted: &Lifted<B::M>,
        inputs: &Matrix,
        masks: Option<&DropoutMasks>,
    ) -> Result<HeadOutput<B::M>> {
        let cfg = &self.config;
        if inputs.ncols() != cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: linalg::shape(inputs),
                rhs: (inputs.nrows(), cfg.input_dim),
            });
        }
        if !linalg::all_finite(inputs) {
            return Err(Error::NonFinite("model input".into()));
        }
        if let Some(m) = masks {
            for branch in [&m.mean, &m.cov].into_iter().flatten() {
                check_masks(branch, &cfg.hidden, inputs.nrows())?;
            }
        }
        let rows = inputs.nrows();
        let k = cfg.output_dim;
        let x = self.input_norm.apply(inputs);
        let p = cfg.dropout_rate;

        let mean_raw = branch_forward(b, &lifted.mean, &x, masks.and_then(|m| m.mean.as_deref()), p, true)?;
        let cov_raw = branch_forward(b, &lifted.cov, &x, masks.and_then(|m| m.cov.as_deref()), p, true)?;

        let scale = b.lift(linalg::diag_from_row(&linalg::row(&self.output_norm.scale)))?;
        let scaled = b.matmul(&mean_raw, &scale)?;
        let offset = Matrix::from_fn(rows, k, |_, c| self.output_norm.offset[c]);
        let mean = b.add_const(&scaled, offset)?;

        let s_raw = b.slice(&cov_raw, 0, 0, rows, k)?;
        let log_scale2 = Matrix::from_fn(rows, k, |_, c| 2.0 * self.output_norm.scale[c].ln());
        let s = b.add_const(&s_raw, log_scale2)?;
        let r = b.slice(&cov_raw, 0, k, rows, cfg.corr_dim())?;
        Ok(HeadOutput { mean, s, r })
    }

    /// Deterministic prediction for a batch of inputs.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<GaussianPrediction>> {
        self.predict_with_masks(inputs, None)
    }

    pub fn predict_with_masks(&self, inputs: &Matrix, masks: Option<&DropoutMasks>) -> Result<Vec<GaussianPrediction>> {
        let mut p = Plain;
        let lifted = self.lift_plain();
        let out = self.forward(&mut p, &lifted, inputs, masks)?;
        (0..inputs.nrows())
            .map(|i| {
                let s = out.s.rows(i, 1).into_owned();
                let r = out.r.rows(i, 1).into_owned();
                let covariance = self.covariance_plain(&s, &r)?;
                Ok(GaussianPrediction { mean: out.mean.row(i).iter().copied().collect(), covariance })
            })
            .collect()
    }

    /// Covariance for one row of head outputs, honoring the model's
    /// [`CovarianceKind`].
    pub fn covariance_plain(&self, s: &Matrix, r: &Matrix) -> Result<Matrix> {
        let mut p = Plain;
        self.covariance_of(&mut p, s, r)
    }

    pub fn covariance_of<B: Backend>(&self, b: &mut B, s: &B::M, r: &B::M) -> Result<B::M> {
        let r = match self.config.covariance {
            CovarianceKind::Full => Some(r),
            CovarianceKind::Diagonal => None,
        };
        assemble_covariance(b, s, r, self.config.rho_scale)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn blob_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![
            ("input_norm.offset".to_string(), linalg::row(&self.input_norm.offset)),
            ("input_norm.scale".to_string(), linalg::row(&self.input_norm.scale)),
            ("output_norm.offset".to_string(), linalg::row(&self.output_norm.offset)),
            ("output_norm.scale".to_string(), linalg::row(&self.output_norm.scale)),
        ];
        for (name, t) in self.tensor_names().into_iter().zip(self.tensors()) {
            out.push((name, t.clone()));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let tensors = self.blob_tensors();
        let mut blob = Vec::new();
        let mut layout = Vec::new();
        for (name, t) in &tensors {
            layout.push(TensorEntry { name: name.clone(), rows: t.nrows(), cols: t.ncols() });
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    blob.extend_from_slice(&t[(r, c)].to_le_bytes());
                }
            }
        }
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            tensors: layout,
            weights: base64::engine::general_purpose::STANDARD.encode(blob),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Parse { line: None, msg: format!("not a model file (format `{}`)", header.format) });
        }
        if header.version != MODEL_VERSION {
            return Err(Error::Version { found: header.version, expected: MODEL_VERSION });
        }
        let file: ModelFile = serde_json::from_str(text).map_err(parse_err)?;
        let mut params = ModelParams::new(file.config, 0)?;
        let blob = base64::engine::general_purpose::STANDARD
            .decode(file.weights.as_bytes())
            .map_err(|e| Error::Parse { line: None, msg: format!("weights: {e}") })?;
        let expected = params.blob_tensors();
        if expected.len() != file.tensors.len() {
            return Err(Error::Parse { line: None, msg: "tensor layout does not match config".into() });
        }
        let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut decoded = Vec::with_capacity(expected.len());
        for ((name, t), entry) in expected.iter().zip(&file.tensors) {
            if *name != entry.name || t.nrows() != entry.rows || t.ncols() != entry.cols {
                return Err(Error::Parse { line: None, msg: format!("unexpected tensor `{}`", entry.name) });
            }
            let mut m = Matrix::zeros(entry.rows, entry.cols);
            for r in 0..entry.rows {
                for c in 0..entry.cols {
                    m[(r, c)] = values
                        .next()
                        .ok_or_else(|| Error::Parse { line: None, msg: "weight blob truncated".into() })?;
                }
            }
            decoded.push(m);
        }
        if blob.len() % 8 != 0 || values.next().is_some() {
            return Err(Error::Parse { line: None, msg: "weight blob has trailing bytes".into() });
        }
        let mut it = decoded.into_iter();
        let row_vec = |m: Matrix| m.iter().copied().collect::<Vec<f64>>();
        params.input_norm = Normalization { offset: row_vec(it.next().unwrap()), scale: row_vec(it.next().unwrap()) };
        params.output_norm = Normalization { offset: row_vec(it.next().unwrap()), scale: row_vec(it.next().unwrap()) };
        for (slot, m) in params.tensors_mut().into_iter().zip(it) {
            *slot = m;
        }
        Ok(params)
    }
}

fn parse_err(e: serde_json::Error) -> Error {
    Error::Parse { line: Some(e.line() as u64), msg: e.to_string() }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Deserialize)]
struct VersionProbe {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    /// Base64 of all tensors, row-major, `f64` little-endian, in `tensors`
    /// order.
    weights: String,
}

fn check_masks(masks: &[Matrix], hidden: &[usize], rows: usize) -> Result<()> {
    if masks.len() != hidden.len() {
        return Err(Error::invalid(format!("{} dropout masks for {} hidden layers", masks.len(), hidden.len())));
    }
    for (m, &w) in masks.iter().zip(hidden) {
        if linalg::shape(m) != (rows, w) {
            return Err(Error::ShapeMismatch { op: "dropout mask", lhs: linalg::shape(m), rhs: (rows, w) });
        }
    }
    Ok(())
}

/// `x·W + 1·b` with the bias broadcast by an outer product with ones.
fn affine<B: Backend>(b: &mut B, x: &B::M, layer: &Dense<B::M>) -> Result<B::M> {
    let rows = b.shape_of(x).0;
    let xw = b.matmul(x, &layer.weight)?;
    let ones = b.lift(Matrix::from_element(rows, 1, 1.0))?;
    let bias = b.matmul(&ones, &layer.bias)?;
    b.add(&xw, &bias)
}

fn branch_forward<B: Backend>(
    b: &mut B,
    branch: &Branch<B::M>,
    x: &Matrix,
    masks: Option<&[Matrix]>,
    dropout_rate: f64,
    with_output_bias: bool,
) -> Result<B::M> {
    let input = b.lift(x.clone())?;
    let mut h = input.clone();
    for (i, layer) in branch.hidden.iter().enumerate() {
        let a = affine(b, &h, layer)?;
        h = b.tanh(&a);
        if let Some(masks) = masks {
            let scaled = &masks[i] * (1.0 / (1.0 - dropout_rate));
            let m = b.lift(scaled)?;
            h = b.hadamard(&h, &m)?;
        }
    }
    let mut out = if with_output_bias {
        affine(b, &h, &branch.output)?
    } else {
        b.matmul(&h, &branch.output.weight)?
    };
    if let Some(skip) = &branch.skip {
        let lin = b.matmul(&input, skip)?;
        out = b.add(&out, &lin)?;
    }
    Ok(out)
}

/// Covariance from log-variances `s` (`1 × k`) and, when given, correlation
/// logits `r` (`1 × k(k−1)/2`, row-major upper triangle):
/// `Σᵢᵢ = exp(sᵢ)`, `Σᵢⱼ = rho_scale · tanh(rᵢⱼ) · √(exp(sᵢ) exp(sⱼ))`.
pub fn assemble_covariance<B: Backend>(b: &mut B, s: &B::M, r: Option<&B::M>, rho_scale: f64) -> Result<B::M> {
    let (_, k) = b.shape_of(s);
    let var = b.exp(s);
    let diag = b.diag(&var)?;
    let Some(r) = r.filter(|_| k > 1) else {
        return Ok(diag);
    };
    let half = b.scale(s, 0.5);
    let sd = b.exp(&half);
    let sd = b.diag(&sd)?;
    let rho = b.tanh(r);
    let rho = b.scale(&rho, rho_scale);
    let corr = b.sym_offdiag(&rho, k)?;
    let off = b.matmul3(&sd, &corr, &sd)?;
    b.add(&diag, &off)
}

/// [`assemble_covariance`] on plain slices.
pub fn assemble_covariance_plain(s: &[f64], r: &[f64], rho_scale: f64) -> Result<Matrix> {
    let mut p = Plain;
    let s = linalg::row(s);
    let r = linalg::row(r);
    assemble_covariance(&mut p, &s, Some(&r), rho_scale)
}
