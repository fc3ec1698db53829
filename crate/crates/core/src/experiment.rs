//! The comparison pipeline: generate tracks, train one model per covariance
//! method on a shared frozen mean, filter the test tracks with each method's
//! covariances and tabulate final-step velocity errors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epistemic::{self, EpistemicEstimate};
use crate::error::{Error, Result};
use crate::kalman::{self, FilterSpec, InitPolicy, TimeCorrelation};
use crate::linalg::{self, Matrix};
use crate::losses::Likelihood;
use crate::model::{CovarianceKind, ModelConfig, ModelParams};
use crate::rng::splitmix64;
use crate::simulator::{self, OodShift, RainbowConfig, Track, TrackConfig, TrackDataset, INPUT_DIM, POS_DIM};
use crate::training::{self, KalmanConfig, MleConfig, MleMode, Sequence, TrainReport};

/// Covariance source compared by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fixed,
    MleVariance,
    MleCovariance,
    KalmanCovariance,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fixed, Method::MleVariance, Method::MleCovariance, Method::KalmanCovariance];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fixed => "fixed",
            Method::MleVariance => "mle-variance",
            Method::MleCovariance => "mle-covariance",
            Method::KalmanCovariance => "kalman-covariance",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Standard,
    TimeCorrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub tracks: TrackConfig,
    pub train_tracks: usize,
    pub test_tracks: usize,
    pub ood: OodShift,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { tracks: TrackConfig::default(), train_tracks: 2000, test_tracks: 500, ood: OodShift::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    /// Dropout in the covariance branch too; off by default because it
    /// blurs the learned covariance.
    pub cov_dropout: bool,
    pub rho_scale: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { hidden: vec![64, 64], dropout_rate: 0.1, cov_dropout: false, rho_scale: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSettings {
    /// Mean branch, trained once and then frozen for every method.
    pub mean: MleConfig,
    /// Covariance heads on the frozen mean.
    pub covariance: MleConfig,
    pub kalman: KalmanConfig,
    /// Start Kalman training from the MLE covariance head.
    pub kalman_pretrain: bool,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            mean: MleConfig { mode: MleMode::MeanOnly, epochs: 40, ..Default::default() },
            covariance: MleConfig { mode: MleMode::CovOnly, epochs: 80, ..Default::default() },
            kalman: KalmanConfig { adam: training::AdamConfig { lr: 1e-4, ..Default::default() }, ..Default::default() },
            kalman_pretrain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSettings {
    pub kind: FilterKind,
    /// White-acceleration density of the filter's process noise.
    pub accel_std: f64,
    pub velocity_std: f64,
    /// Joseph-form covariance update; keeps P positive semi-definite when
    /// measurement covariances are tiny.
    pub joseph: bool,
    /// Variance, mm², added to every emitted measurement covariance.
    pub sigma_floor: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self { kind: FilterKind::Standard, accel_std: 0.0, velocity_std: kalman::DEFAULT_VELOCITY_STD, joseph: false, sigma_floor: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpistemicSettings {
    pub enabled: bool,
    pub samples: usize,
    /// Fit the covariance head to the residual left after the epistemic term.
    pub residual_tuning: bool,
}

impl Default for EpistemicSettings {
    fn default() -> Self {
        Self { enabled: true, samples: epistemic::DEFAULT_SAMPLES, residual_tuning: false }
    }
}

/// Existing artifact directories to read instead of the `--out` layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSettings {
    pub data: Option<std::path::PathBuf>,
    pub models: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub data: DataSettings,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub filter: FilterSettings,
    pub epistemic: EpistemicSettings,
    pub paths: PathSettings,
    pub rainbow: RainbowConfig,
    pub rainbow_training: MleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::ALL.to_vec(),
            data: DataSettings::default(),
            model: ModelSettings::default(),
            training: TrainingSettings::default(),
            filter: FilterSettings::default(),
            epistemic: EpistemicSettings::default(),
            paths: PathSettings::default(),
            rainbow: RainbowConfig::default(),
            rainbow_training: MleConfig { epochs: 300, batch_size: 32, adam: training::AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| text[..s.start].matches('\n').count() as u64 + 1),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("methods list is empty"));
        }
        self.data.tracks.validate()?;
        if self.data.train_tracks < 2 || self.data.test_tracks == 0 {
            return Err(Error::invalid("need at least 2 training tracks and 1 test track"));
        }
        self.model_config(CovarianceKind::Full).validate()?;
        if self.epistemic.samples == 0 {
            return Err(Error::invalid("epistemic samples must be at least 1"));
        }
        let f = &self.filter;
        if !(f.accel_std >= 0.0) || !(f.velocity_std > 0.0) || !(f.sigma_floor >= 0.0) || !f.sigma_floor.is_finite() {
            return Err(Error::invalid("filter noise settings must be non-negative"));
        }
        if self.methods.contains(&Method::KalmanCovariance) && !self.training.kalman.subset.is_empty() {
            let spec = self.filter_spec()?;
            kalman::check_subset_condition(&spec.h, &self.training.kalman.subset).into_result()?;
        }
        for p in [&self.paths.data, &self.paths.models].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::invalid(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn model_config(&self, covariance: CovarianceKind) -> ModelConfig {
        ModelConfig {
            hidden: self.model.hidden.clone(),
            dropout_rate: self.model.dropout_rate,
            cov_dropout: self.model.cov_dropout,
            rho_scale: self.model.rho_scale,
            covariance,
            ..ModelConfig::new(INPUT_DIM, POS_DIM)
        }
    }

    pub fn filter_spec(&self) -> Result<FilterSpec> {
        let mut spec = FilterSpec::constant_velocity(POS_DIM, self.data.tracks.dt, self.filter.accel_std)?;
        spec.init = InitPolicy::FirstMeasurement { unobserved_std: self.filter.velocity_std };
        spec.joseph = self.filter.joseph;
        Ok(spec)
    }

    /// Seed of one pipeline stage, derived from the experiment seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(stage.wrapping_mul(0x9E37_79B9)))
    }
}

/// Train, in-domain test and shifted test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: TrackDataset,
    pub test: TrackDataset,
    pub ood: TrackDataset,
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Datasets> {
    let tracks = |stage: u64, n: usize| {
        let tc = TrackConfig { seed: cfg.stage_seed(stage), ..cfg.data.tracks.clone() };
        simulator::generate_tracks(&tc, n)
    };
    let train = tracks(1, cfg.data.train_tracks)?;
    let test = tracks(2, cfg.data.test_tracks)?;
    let shift = OodShift { seed: cfg.stage_seed(3), ..cfg.data.ood.clone() };
    let ood = simulator::apply_ood_shift(&test, &shift)?;
    Ok(Datasets { train, test, ood })
}

/// A method's trained covariance source.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceModel {
    Fixed { mean: ModelParams, sigma: Matrix },
    Learned(ModelParams),
}

impl CovarianceModel {
    pub fn mean_model(&self) -> &ModelParams {
        match self {
            CovarianceModel::Fixed { mean, .. } => mean,
            CovarianceModel::Learned(p) => p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMethods {
    pub base: ModelParams,
    pub models: BTreeMap<Method, CovarianceModel>,
    pub reports: BTreeMap<String, TrainReport>,
}

pub fn sequences(data: &TrackDataset) -> Vec<Sequence> {
    data.tracks.iter().map(|t| Sequence { inputs: t.inputs(), states: t.states() }).collect()
}

/// Fit normalization and a least-squares start, then train the mean branch.
pub fn train_base(cfg: &ExperimentConfig, inputs: &Matrix, labels: &Matrix) -> Result<(ModelParams, TrainReport)> {
    let mut base = ModelParams::new(cfg.model_config(CovarianceKind::Full), cfg.stage_seed(10))?;
    base.fit_normalization(inputs, labels);
    base.warm_start_linear(inputs, labels)?;
    set_residual_variance(&mut base, inputs, labels)?;
    let mean_cfg = MleConfig { mode: MleMode::MeanOnly, seed: cfg.stage_seed(11), ..cfg.training.mean.clone() };
    let report = training::train_mle(&mut base, inputs, labels, &mean_cfg)?;
    set_residual_variance(&mut base, inputs, labels)?;
    Ok((base, report))
}

fn mean_predictions(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    let preds = params.predict(inputs)?;
    Ok(Matrix::from_fn(inputs.nrows(), params.config.output_dim, |i, j| preds[i].mean[j]))
}

fn set_residual_variance(params: &mut ModelParams, inputs: &Matrix, labels: &Matrix) -> Result<()> {
    let preds = mean_predictions(params, inputs)?;
    let cov = training::fixed_covariance_baseline(&preds, labels)?;
    let var: Vec<f64> = cov.diagonal().iter().copied().collect();
    params.set_variance_bias(&var);
    Ok(())
}

/// Covariance head trained by NLL on the frozen mean of `base`.
pub fn train_covariance_head(
    cfg: &ExperimentConfig,
    base: &ModelParams,
    kind: CovarianceKind,
    inputs: &Matrix,
    labels: &Matrix,
    stage: u64,
) -> Result<(ModelParams, TrainReport)> {
    let mut p = base.clone();
    p.config.covariance = kind;
    let likelihood = match kind {
        CovarianceKind::Full => Likelihood::Full,
        CovarianceKind::Diagonal => Likelihood::Diagonal,
    };
    let tcfg = MleConfig { mode: MleMode::CovOnly, likelihood, seed: cfg.stage_seed(stage), ..cfg.training.covariance.clone() };
    let offsets = if cfg.epistemic.residual_tuning && cfg.model.dropout_rate > 0.0 {
        let est = epistemic::predict_with_epistemic(base, inputs, cfg.epistemic.samples, cfg.stage_seed(stage + 100))?;
        Some(est.into_iter().map(|e| e.epistemic).collect::<Vec<_>>())
    } else {
        None
    };
    let report = training::train_mle_with_offsets(&mut p, inputs, labels, offsets.as_deref(), &tcfg)?;
    Ok((p, report))
}

/// Train every configured method on one frozen mean. The Kalman head is
/// trained through the configured filter kind.
pub fn train_methods(cfg: &ExperimentConfig, train: &TrackDataset) -> Result<TrainedMethods> {
    let (inputs, labels) = train.regression_pairs();
    let (base, base_report) = train_base(cfg, &inputs, &labels)?;
    let mut reports = BTreeMap::new();
    reports.insert("mean".to_string(), base_report);
    let mut models = BTreeMap::new();
    let wants = |m: Method| cfg.methods.contains(&m);
    if wants(Method::Fixed) {
        let sigma = training::fixed_covariance_baseline(&mean_predictions(&base, &inputs)?, &labels)?;
        models.insert(Method::Fixed, CovarianceModel::Fixed { mean: base.clone(), sigma });
    }
    if wants(Method::MleVariance) {
        let (p, r) = train_covariance_head(cfg, &base, CovarianceKind::Diagonal, &inputs, &labels, 20)?;
        reports.insert(Method::MleVariance.name().into(), r);
        models.insert(Method::MleVariance, CovarianceModel::Learned(p));
    }
    let mut mle_full = None;
    if wants(Method::MleCovariance) || (wants(Method::KalmanCovariance) && cfg.training.kalman_pretrain) {
        let (p, r) = train_covariance_head(cfg, &base, CovarianceKind::Full, &inputs, &labels, 21)?;
        reports.insert(Method::MleCovariance.name().into(), r);
        mle_full = Some(p);
    }
    if wants(Method::KalmanCovariance) {
        let mut p = match (&mle_full, cfg.training.kalman_pretrain) {
            (Some(p), true) => p.clone(),
            _ => base.clone(),
        };
        let spec = cfg.filter_spec()?;
        let correlation = match cfg.filter.kind {
            FilterKind::Standard => None,
            FilterKind::TimeCorrelated => Some(estimate_correlation(&base, train)?),
        };
        let kcfg = KalmanConfig { seed: cfg.stage_seed(22), ..cfg.training.kalman.clone() };
        let r = training::train_kalman_through(&mut p, &sequences(train), &spec, correlation.as_ref(), &kcfg)?;
        reports.insert(Method::KalmanCovariance.name().into(), r);
        models.insert(Method::KalmanCovariance, CovarianceModel::Learned(p));
    }
    if let (true, Some(p)) = (wants(Method::MleCovariance), mle_full) {
        models.insert(Method::MleCovariance, CovarianceModel::Learned(p));
    }
    Ok(TrainedMethods { base, models, reports })
}

/// Filter measurements and covariances for one track.
pub struct Emission {
    pub measurements: Vec<Vec<f64>>,
    pub sigmas: Vec<Matrix>,
}

/// How a row's covariance is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    Aleatoric,
    /// Aleatoric plus dropout epistemic term.
    Combined { samples: usize, seed: u64 },
}

/// Deterministic measurements `f(x)` with the method's covariances.
pub fn emit(model: &CovarianceModel, track: &Track, mode: SigmaMode) -> Result<Emission> {
    let inputs = track.inputs();
    let preds = model.mean_model().predict(&inputs)?;
    let measurements: Vec<Vec<f64>> = preds.iter().map(|p| p.mean.clone()).collect();
    let sigmas = match (model, mode) {
        (CovarianceModel::Fixed { sigma, .. }, _) => vec![sigma.clone(); preds.len()],
        (CovarianceModel::Learned(_), SigmaMode::Aleatoric) => preds.into_iter().map(|p| p.covariance).collect(),
        (CovarianceModel::Learned(p), SigmaMode::Combined { samples, seed }) => {
            let est: Vec<EpistemicEstimate> = epistemic::predict_with_epistemic(p, &inputs, samples, seed)?;
            est.into_iter()
                .map(|e| match p.config.covariance {
                    CovarianceKind::Full => e.predictive,
                    CovarianceKind::Diagonal => e.diagonal().predictive,
                })
                .collect()
        }
    };
    Ok(Emission { measurements, sigmas })
}

/// Outcome of filtering one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// Velocity error norm after each measurement.
    pub velocity_errors: Vec<f64>,
    /// Mean squared error over all state components after each measurement.
    pub state_sq_errors: Vec<f64>,
    /// Covariances handed to the filter, and how many needed a load.
    pub emitted: usize,
    pub jittered: usize,
}

impl TrackResult {
    pub fn final_error(&self) -> f64 {
        *self.velocity_errors.last().unwrap_or(&f64::NAN)
    }

    /// Mean of the per-step squared state errors after `burn_in` steps.
    pub fn state_mse(&self, burn_in: usize) -> f64 {
        mean(self.state_sq_errors.get(burn_in..).unwrap_or(&[]))
    }
}

/// Run the configured filter on an emission, after passing every covariance
/// through the jitter ladder.
pub fn filter_track(
    spec: &FilterSpec,
    correlation: Option<&TimeCorrelation>,
    emission: &Emission,
    states: &[Vec<f64>],
) -> Result<TrackResult> {
    let mut jittered = 0;
    let mut sigmas = Vec::with_capacity(emission.sigmas.len());
    for s in &emission.sigmas {
        let (s, lambda) = linalg::stabilize(s)?;
        jittered += usize::from(lambda > 0.0);
        sigmas.push(s);
    }
    let run = match correlation {
        None => kalman::run_filter(spec, &emission.measurements, &sigmas)?,
        Some(tc) => kalman::run_filter_time_correlated(spec, tc, &emission.measurements, &sigmas)?,
    };
    let n = spec.state_dim();
    let d = n / 2;
    let sq = |s: &kalman::FilterState, z: &[f64], range: std::ops::Range<usize>| {
        range.map(|i| (s.z[i] - z[i]).powi(2)).sum::<f64>()
    };
    let velocity_errors = run.states.iter().zip(states).map(|(s, z)| sq(s, z, d..n).sqrt()).collect();
    let state_sq_errors = run.states.iter().zip(states).map(|(s, z)| sq(s, z, 0..n) / n as f64).collect();
    Ok(TrackResult { velocity_errors, state_sq_errors, emitted: sigmas.len(), jittered })
}

/// Estimate AR(1) parameters of the model's residuals on training tracks.
pub fn estimate_correlation(model: &ModelParams, train: &TrackDataset) -> Result<TimeCorrelation> {
    let residuals: Vec<Vec<Vec<f64>>> = train
        .tracks
        .iter()
        .map(|t| {
            let preds = model.predict(&t.inputs())?;
            Ok(preds
                .iter()
                .zip(&t.steps)
                .map(|(p, s)| p.mean.iter().zip(&s.z).map(|(a, b)| a - b).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    TimeCorrelation::estimate(&residuals, POS_DIM)
}

/// One evaluated row: a method, optionally with the epistemic term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub combined: bool,
}

pub fn variants(methods: &[Method], epistemic: bool) -> Vec<Variant> {
    let mut out: Vec<Variant> =
        methods.iter().map(|&m| Variant { label: m.name().into(), method: m, combined: false }).collect();
    if epistemic {
        for &m in methods.iter().filter(|m| **m != Method::Fixed) {
            out.push(Variant { label: format!("{}+epistemic", m.name()), method: m, combined: true });
        }
    }
    out
}

/// Per-track results of every variant on one dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub variants: Vec<Variant>,
    pub results: Vec<Vec<TrackResult>>,
}

impl Evaluation {
    pub fn state_mses(&self, label: &str, burn_in: usize) -> Option<Vec<f64>> {
        let i = self.variants.iter().position(|v| v.label == label)?;
        Some(self.results[i].iter().map(|r| r.state_mse(burn_in)).collect())
    }

    pub fn final_errors(&self, label: &str) -> Option<Vec<f64>> {
        let i = self.variants.iter().position(|v| v.label == label)?;
        Some(self.results[i].iter().map(TrackResult::final_error).collect())
    }

    /// Emitted covariances and how many failed or needed the ladder.
    pub fn validity(&self) -> (usize, usize) {
        self.results.iter().flatten().fold((0, 0), |(e, j), r| (e + r.emitted, j + r.jittered))
    }

    pub fn table(&self, baseline: &str) -> Result<MetricsTable> {
        let rows: Vec<(String, Vec<f64>)> =
            self.variants.iter().map(|v| (v.label.clone(), self.final_errors(&v.label).unwrap_or_default())).collect();
        MetricsTable::new(&rows, baseline)
    }

    /// Mean velocity error after each measurement count, per variant.
    pub fn curves(&self) -> Vec<(String, Vec<f64>)> {
        self.variants
            .iter()
            .zip(&self.results)
            .map(|(v, rs)| {
                let len = rs.iter().map(|r| r.velocity_errors.len()).min().unwrap_or(0);
                let curve = (0..len)
                    .map(|t| rs.iter().map(|r| r.velocity_errors[t]).sum::<f64>() / rs.len() as f64)
                    .collect();
                (v.label.clone(), curve)
            })
            .collect()
    }
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    models: &BTreeMap<Method, CovarianceModel>,
    data: &TrackDataset,
    variants: &[Variant],
    correlation: Option<&TimeCorrelation>,
) -> Result<Evaluation> {
    let spec = cfg.filter_spec()?;
    let mut results = Vec::with_capacity(variants.len());
    for (vi, v) in variants.iter().enumerate() {
        let model = models.get(&v.method).ok_or_else(|| Error::invalid(format!("no trained model for {}", v.method)))?;
        let rs: Vec<TrackResult> = data
            .tracks
            .par_iter()
            .enumerate()
            .map(|(ti, track)| {
                let mode = if v.combined {
                    let seed = splitmix64(cfg.stage_seed(30 + vi as u64) ^ ti as u64);
                    SigmaMode::Combined { samples: cfg.epistemic.samples, seed }
                } else {
                    SigmaMode::Aleatoric
                };
                let mut emission = emit(model, track, mode)?;
                if cfg.filter.sigma_floor > 0.0 {
                    for s in &mut emission.sigmas {
                        *s += Matrix::identity(POS_DIM, POS_DIM) * cfg.filter.sigma_floor;
                    }
                }
                filter_track(&spec, correlation, &emission, &track.states())
            })
            .collect::<Result<_>>()?;
        results.push(rs);
    }
    Ok(Evaluation { variants: variants.to_vec(), results })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub mean: f64,
    pub median: f64,
    /// Mean and median of per-track error ratios to the baseline.
    pub rel_mean_of_ratios: f64,
    pub rel_median_of_ratios: f64,
    /// Ratio of this row's mean (median) to the baseline's.
    pub rel_ratio_of_means: f64,
    pub rel_ratio_of_medians: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub baseline: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn new(rows: &[(String, Vec<f64>)], baseline: &str) -> Result<Self> {
        let base = rows
            .iter()
            .find(|(n, _)| n == baseline)
            .map(|(_, e)| e.clone())
            .ok_or_else(|| Error::invalid(format!("baseline `{baseline}` not among the rows")))?;
        let base_mean = mean(&base);
        let base_median = median(&base);
        let rows = rows
            .iter()
            .map(|(name, errs)| {
                if errs.len() != base.len() {
                    return Err(Error::invalid(format!("{name}: {} tracks vs baseline {}", errs.len(), base.len())));
                }
                let ratios: Vec<f64> = if name == baseline {
                    vec![1.0; errs.len()]
                } else {
                    errs.iter().zip(&base).map(|(e, b)| e / b).collect()
                };
                let (m, md) = (mean(errs), median(errs));
                let same = name == baseline;
                Ok(MetricsRow {
                    method: name.clone(),
                    mean: m,
                    median: md,
                    rel_mean_of_ratios: mean(&ratios),
                    rel_median_of_ratios: median(&ratios),
                    rel_ratio_of_means: if same { 1.0 } else { m / base_mean },
                    rel_ratio_of_medians: if same { 1.0 } else { md / base_median },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { baseline: baseline.to_string(), rows })
    }

    pub fn row(&self, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "method,mean,median,rel_mean_of_ratios,rel_median_of_ratios,rel_ratio_of_means,rel_ratio_of_medians")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.method, r.mean, r.median, r.rel_mean_of_ratios, r.rel_median_of_ratios, r.rel_ratio_of_means, r.rel_ratio_of_medians
            )?;
        }
        Ok(())
    }

    /// Fixed-width table for terminals.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<28} {:>10} {:>10} {:>9} {:>9} {:>9} {:>9}\n",
            "method", "mean", "median", "rel.mean", "rel.med", "mean/mean", "med/med"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:>10.3} {:>10.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}\n",
                r.method, r.mean, r.median, r.rel_mean_of_ratios, r.rel_median_of_ratios, r.rel_ratio_of_means, r.rel_ratio_of_medians
            ));
        }
        s
    }
}

pub fn write_curves(w: &mut impl Write, curves: &[(String, Vec<f64>)]) -> Result<()> {
    writeln!(w, "method,measurements,mean_velocity_error")?;
    for (name, c) in curves {
        for (t, v) in c.iter().enumerate() {
            writeln!(w, "{name},{},{v}", t + 1)?;
        }
    }
    Ok(())
}

/// Average agreement between predicted and true covariances: mean relative
/// error of per-coordinate standard deviations, and mean absolute error of
/// correlation coefficients.
pub fn covariance_recovery(predicted: &[Matrix], truth: &[Matrix]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::invalid("predicted and true covariance lists differ in length"));
    }
    let (mut std_err, mut n_std, mut corr_err, mut n_corr) = (0.0, 0usize, 0.0, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        let k = t.nrows();
        for i in 0..k {
            std_err += (p[(i, i)].sqrt() / t[(i, i)].sqrt() - 1.0).abs();
            n_std += 1;
            for j in (i + 1)..k {
                let rp = p[(i, j)] / (p[(i, i)] * p[(j, j)]).sqrt();
                let rt = t[(i, j)] / (t[(i, i)] * t[(j, j)]).sqrt();
                corr_err += (rp - rt).abs();
                n_corr += 1;
            }
        }
    }
    Ok((std_err / n_std as f64, if n_corr == 0 { 0.0 } else { corr_err / n_corr as f64 }))
}

/// Rainbow demo: train a small full-covariance head and report each point's
/// predicted ellipse.
pub struct RainbowFit {
    pub points: Vec<simulator::RainbowPoint>,
    pub predictions: Vec<crate::model::GaussianPrediction>,
    pub report: TrainReport,
}

pub fn rainbow_model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig { hidden: vec![32, 32], dropout_rate: 0.0, rho_scale: cfg.model.rho_scale, ..ModelConfig::new(1, 2) }
}

pub fn fit_rainbow(cfg: &ExperimentConfig) -> Result<(ModelParams, RainbowFit)> {
    let mle = &cfg.rainbow_training;
    let rc = RainbowConfig { seed: cfg.stage_seed(40), ..cfg.rainbow.clone() };
    let points = simulator::generate_rainbow(&rc)?;
    let (x, y) = simulator::rainbow_pairs(&points);
    let mut p = ModelParams::new(rainbow_model_config(cfg), cfg.stage_seed(41))?;
    p.fit_normalization(&x, &y);
    let tcfg = MleConfig { mode: MleMode::Joint, seed: cfg.stage_seed(42), ..mle.clone() };
    let report = training::train_mle(&mut p, &x, &y, &tcfg)?;
    let predictions = p.predict(&x)?;
    Ok((p, RainbowFit { points, predictions, report }))
}

/// Semi-axes and orientation of the 1-σ ellipse of a 2×2 covariance:
/// `(major, minor, angle)` with the angle of the major axis in radians.
pub fn ellipse(sigma: &Matrix) -> (f64, f64, f64) {
    let (a, b, c) = (sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c).powi(2) + b * b).sqrt();
    let l1 = mid + rad;
    let l2 = (mid - rad).max(0.0);
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    (l1.sqrt(), l2.sqrt(), angle)
}
