//! Optimizer and training regimes: Gaussian maximum likelihood (joint, mean
//! only, or covariance only on a frozen mean), end-to-end training through
//! the Kalman filter, and the fixed-covariance baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kalman::{self, FilterSpec, TimeCorrelation};
use crate::linalg::{self, Matrix};
use crate::losses::{self, Likelihood};
use crate::model::{CovarianceKind, ModelParams, Trainable};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v) = params.into_iter().map(|p| (p.map(|_| 0.0), p.map(|_| 0.0))).unzip();
        Self { config, m, v, step: 0 }
    }
}

/// One Adam update of `params` in place. `names` label parameters in error
/// messages.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], names: &[String], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::ShapeMismatch { op: "adam_step", lhs: p.shape(), rhs: g.shape() });
        }
        if !linalg::all_finite(g) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(())
}

fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

/// Per-epoch history of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: String,
    pub loss_curve: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Covariances that needed a diagonal load during training.
    pub jitter_events: usize,
    /// Not serialized, so reports from identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
    pub final_metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_loss_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,loss,grad_norm")?;
        for (i, (l, g)) in self.loss_curve.iter().zip(&self.grad_norms).enumerate() {
            writeln!(w, "{},{},{}", i + 1, l, g)?;
        }
        Ok(())
    }

    pub fn save(&self, json: impl AsRef<Path>, csv: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
        self.write_loss_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MleMode {
    Joint,
    MeanOnly,
    /// Train the covariance branch on a frozen mean.
    CovOnly,
}

impl MleMode {
    fn trainable(self) -> Trainable {
        match self {
            MleMode::Joint => Trainable::All,
            MleMode::MeanOnly => Trainable::Mean,
            MleMode::CovOnly => Trainable::Cov,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub mode: MleMode,
    pub likelihood: Likelihood,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Train with dropout masks when the model has a dropout rate.
    pub dropout: bool,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: f64,
    /// Learning rate at the last epoch as a fraction of `adam.lr`, reached
    /// by cosine annealing.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            mode: MleMode::Joint,
            likelihood: Likelihood::Full,
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig::default(),
            dropout: true,
            clip_norm: 10.0,
            final_lr_fraction: 0.01,
            seed: 0,
        }
    }
}

fn cosine_lr(lr: f64, final_fraction: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs < 2 {
        return lr;
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn clip(grads: &mut [Matrix], norm: f64, max: f64) {
    if norm > max {
        let c = max / norm;
        grads.iter_mut().for_each(|g| *g *= c);
    }
}

/// Indices into [`ModelParams::tensors`] that a group updates.
fn updated_indices(params: &ModelParams, trainable: Trainable) -> Vec<usize> {
    let total = params.tensors().len();
    let split = params.mean_tensor_count();
    match trainable {
        Trainable::All => (0..total).collect(),
        Trainable::Mean => (0..split).collect(),
        Trainable::Cov => (split..total).collect(),
        Trainable::None => Vec::new(),
    }
}

struct Updater {
    indices: Vec<usize>,
    names: Vec<String>,
    state: OptimState,
}

impl Updater {
    fn new(params: &ModelParams, trainable: Trainable, adam: AdamConfig) -> Self {
        let indices = updated_indices(params, trainable);
        let tensors = params.tensors();
        let all_names = params.tensor_names();
        let names = indices.iter().map(|&i| all_names[i].clone()).collect();
        let state = OptimState::new(adam, indices.iter().map(|&i| tensors[i]));
        Self { indices, names, state }
    }

    fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Matrix> {
        self.indices.iter().map(|&i| tape.grad(vars[i])).collect()
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &[Matrix]) -> Result<()> {
        let mut all = params.tensors_mut();
        let mut selected: Vec<&mut Matrix> = Vec::with_capacity(self.indices.len());
        let mut want = self.indices.iter().peekable();
        for (i, t) in all.drain(..).enumerate() {
            if want.peek() == Some(&&i) {
                selected.push(t);
                want.next();
            }
        }
        adam_step(&mut selected, grads, &self.names, &mut self.state)
    }
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn effective_likelihood(params: &ModelParams, requested: Likelihood) -> Likelihood {
    match params.config.covariance {
        CovarianceKind::Diagonal => Likelihood::Diagonal,
        CovarianceKind::Full => requested,
    }
}

/// Minibatch NLL training. Rows of `inputs` pair with rows of `labels`.
pub fn train_mle(params: &mut ModelParams, inputs: &Matrix, labels: &Matrix, cfg: &MleConfig) -> Result<TrainReport> {
    train_mle_with_offsets(params, inputs, labels, None, cfg)
}

/// [`train_mle`] where row `i` is scored against `Σ(xᵢ) + offsets[i]`.
pub fn train_mle_with_offsets(
    params: &mut ModelParams,
    inputs: &Matrix,
    labels: &Matrix,
    offsets: Option<&[Matrix]>,
    cfg: &MleConfig,
) -> Result<TrainReport> {
    let n = inputs.nrows();
    if n == 0 || labels.nrows() != n {
        return Err(Error::invalid(format!("{n} inputs for {} labels", labels.nrows())));
    }
    if labels.ncols() != params.config.output_dim {
        return Err(Error::invalid("label width differs from the model output"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let started = Instant::now();
    let trainable = cfg.mode.trainable();
    let likelihood = effective_likelihood(params, cfg.likelihood);
    let mut updater = Updater::new(params, trainable, cfg.adam);
    let mut rng = Rng::new(cfg.seed);
    let use_dropout = cfg.dropout && params.config.dropout_rate > 0.0;
    let mut report = TrainReport {
        regime: format!("mle-{}", serde_json::to_value(cfg.mode)?.as_str().unwrap_or("")),
        config: serde_json::to_value(cfg)?,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        updater.state.config.lr = cosine_lr(cfg.adam.lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = select_rows(inputs, chunk);
            let yb = select_rows(labels, chunk);
            let ob: Option<Vec<Matrix>> = offsets.map(|o| chunk.iter().map(|&i| o[i].clone()).collect());
            // The frozen branch runs in inference mode.
            let masks = use_dropout.then(|| params.sample_dropout_masks_with(chunk.len(), &mut rng).restrict(trainable));
            let mut tape = Tape::new();
            let lifted = params.lift(&mut tape, trainable)?;
            let out = params.forward(&mut tape, &lifted, &xb, masks.as_ref())?;
            let loss = losses::batch_nll_with_offsets(
                &mut tape,
                &out,
                &yb,
                likelihood,
                params.config.rho_scale,
                ob.as_deref(),
            )?;
            if !loss.report.total.is_finite() {
                return Err(Error::Divergence(format!("epoch {}: loss {}", epoch + 1, loss.report.total)));
            }
            report.jitter_events += loss.report.jittered;
            tape.backward(loss.node)?;
            let mut grads = updater.grads(&tape, &lifted.flat());
            let norm = global_norm(&grads);
            clip(&mut grads, norm, cfg.clip_norm);
            norm_sum += norm;
            updater.apply(params, &grads)?;
            loss_sum += loss.report.total * chunk.len() as f64;
            batches += 1;
        }
        let epoch_loss = loss_sum / n as f64;
        log::debug!("{} epoch {}: loss {epoch_loss:.6}", report.regime, epoch + 1);
        report.loss_curve.push(epoch_loss);
        report.grad_norms.push(norm_sum / batches as f64);
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean NLL of a trained model on a held-out set (no dropout).
pub fn evaluate_nll(params: &ModelParams, inputs: &Matrix, labels: &Matrix, likelihood: Likelihood) -> Result<f64> {
    let mut tape = Tape::new();
    let lifted = params.lift(&mut tape, Trainable::None)?;
    let out = params.forward(&mut tape, &lifted, inputs, None)?;
    let loss = losses::batch_nll(&mut tape, &out, labels, effective_likelihood(params, likelihood), params.config.rho_scale)?;
    Ok(loss.report.total)
}

/// Population covariance (divide by N) of `labels − predictions` about the
/// residual mean.
pub fn fixed_covariance_baseline(predictions: &Matrix, labels: &Matrix) -> Result<Matrix> {
    if predictions.shape() != labels.shape() {
        return Err(Error::ShapeMismatch { op: "fixed_covariance_baseline", lhs: predictions.shape(), rhs: labels.shape() });
    }
    let n = labels.nrows();
    if n < 2 {
        return Err(Error::invalid("at least two residuals are required"));
    }
    let r = labels - predictions;
    let mean = r.row_mean();
    let k = r.ncols();
    let mut cov = Matrix::zeros(k, k);
    for i in 0..n {
        let d = r.row(i) - &mean;
        cov += d.transpose() * &d;
    }
    Ok(linalg::symmetrize(&(cov / n as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    pub epochs: usize,
    pub tracks_per_step: usize,
    /// Truncated backpropagation window, steps.
    pub window: usize,
    pub burn_in: usize,
    /// State indices entering the loss; empty means every state.
    pub subset: Vec<usize>,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Also update the mean branch.
    pub train_mean: bool,
    pub seed: u64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            tracks_per_step: 8,
            window: 10,
            burn_in: 2,
            subset: Vec::new(),
            clip_norm: 10.0,
            adam: AdamConfig::default(),
            train_mean: false,
            seed: 0,
        }
    }
}

/// A track for filter training: model inputs (`T × d`) and true states.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Matrix,
    pub states: Vec<Vec<f64>>,
}

/// Filter loss of one sequence on `tape`: model outputs become the
/// measurements and covariances of a taped filter run, time-correlated when
/// `correlation` is given.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss(
    tape: &mut Tape,
    params: &ModelParams,
    lifted: &crate::model::Lifted<Var>,
    spec: &FilterSpec,
    correlation: Option<&TimeCorrelation>,
    seq: &Sequence,
    subset: &[usize],
    window: usize,
    burn_in: usize,
) -> Result<(Var, usize)> {
    let out = params.forward(tape, lifted, &seq.inputs, None)?;
    let k = params.config.output_dim;
    let m = params.config.corr_dim();
    let steps = seq.inputs.nrows();
    let mut measurements = Vec::with_capacity(steps);
    let mut sigmas = Vec::with_capacity(steps);
    let mut jittered = 0;
    for t in 0..steps {
        let mean = tape.slice(out.mean, t, 0, 1, k)?;
        measurements.push(tape.transpose(mean));
        let s = tape.slice(out.s, t, 0, 1, k)?;
        let r = tape.slice(out.r, t, 0, 1, m)?;
        let sigma = params.covariance_of(tape, &s, &r)?;
        let (sigma, lambda) = losses::stabilize_covariance(tape, sigma)?;
        jittered += usize::from(lambda > 0.0);
        sigmas.push(sigma);
    }
    let estimates = match correlation {
        None => kalman::run_filter_diff(tape, spec, &measurements, &sigmas, Some(window))?,
        Some(tc) => kalman::run_filter_time_correlated_diff(tape, spec, tc, &measurements, &sigmas, Some(window))?,
    };
    let loss = losses::state_estimate_loss(tape, &estimates, &seq.states, subset, burn_in)?;
    Ok((loss, jittered))
}

/// End-to-end training through the filter: per batch of tracks, run the
/// taped filter on the model's measurements and covariances and descend the
/// mean squared state error over `subset`.
pub fn train_kalman(params: &mut ModelParams, tracks: &[Sequence], spec: &FilterSpec, cfg: &KalmanConfig) -> Result<TrainReport> {
    train_kalman_through(params, tracks, spec, None, cfg)
}

/// [`train_kalman`] through the time-correlated filter when `correlation`
/// is given.
pub fn train_kalman_through(
    params: &mut ModelParams,
    tracks: &[Sequence],
    spec: &FilterSpec,
    correlation: Option<&TimeCorrelation>,
    cfg: &KalmanConfig,
) -> Result<TrainReport> {
    if tracks.is_empty() {
        return Err(Error::invalid("no training tracks"));
    }
    if cfg.window == 0 || cfg.tracks_per_step == 0 {
        return Err(Error::invalid("window and tracks_per_step must be positive"));
    }
    let subset: Vec<usize> = if cfg.subset.is_empty() { (0..spec.state_dim()).collect() } else { cfg.subset.clone() };
    kalman::check_subset_condition(&spec.h, &subset).into_result()?;
    let started = Instant::now();
    let trainable = if cfg.train_mean { Trainable::All } else { Trainable::Cov };
    let mut updater = Updater::new(params, trainable, cfg.adam);
    let mut rng = Rng::new(cfg.seed);
    let mut report = TrainReport {
        regime: "kalman".into(),
        config: serde_json::to_value(cfg)?,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.tracks_per_step) {
            let mut tape = Tape::new();
            let lifted = params.lift(&mut tape, trainable)?;
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (loss, jittered) =
                    sequence_loss(&mut tape, params, &lifted, spec, correlation, &tracks[i], &subset, cfg.window, cfg.burn_in)?;
                report.jitter_events += jittered;
                terms.push(loss);
            }
            let total = tape.add_n(&terms)?;
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("epoch {}: filter loss {value}", epoch + 1)));
            }
            tape.backward(loss)?;
            let mut grads = updater.grads(&tape, &lifted.flat());
            let norm = global_norm(&grads);
            clip(&mut grads, norm, cfg.clip_norm);
            norm_sum += norm;
            updater.apply(params, &grads)?;
            loss_sum += value * chunk.len() as f64;
            batches += 1;
        }
        let epoch_loss = loss_sum / tracks.len() as f64;
        log::debug!("kalman epoch {}: loss {epoch_loss:.6}", epoch + 1);
        report.loss_curve.push(epoch_loss);
        report.grad_norms.push(norm_sum / batches as f64);
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}
