//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use covfilt::autodiff::Tape;
use covfilt::epistemic;
use covfilt::experiment::{self, ExperimentConfig};
use covfilt::kalman::{self, FilterSpec, InitPolicy};
use covfilt::linalg::{self, Matrix};
use covfilt::losses;
use covfilt::model::{self, CovarianceKind, GaussianPrediction, ModelConfig, ModelParams};
use covfilt::simulator;
use covfilt::training::{self, MleConfig, MleMode};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(pycovfilt, CovfiltError, PyException, "Raised for any library failure; `args[0]` is the error kind.");

fn err(e: covfilt::Error) -> PyErr {
    CovfiltError::new_err((e.kind(), e.to_string()))
}

type Rows = Vec<Vec<f64>>;

fn to_matrix(rows: &Rows) -> PyResult<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn to_rows(m: &Matrix) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn split(preds: Vec<GaussianPrediction>) -> (Rows, Vec<Rows>) {
    preds.into_iter().map(|p| (p.mean, to_rows(&p.covariance))).unzip()
}

fn parse_kind(kind: &str) -> PyResult<CovarianceKind> {
    match kind {
        "full" => Ok(CovarianceKind::Full),
        "diagonal" => Ok(CovarianceKind::Diagonal),
        _ => Err(PyValueError::new_err(format!("covariance must be 'full' or 'diagonal', got {kind:?}"))),
    }
}

fn parse_mode(mode: &str) -> PyResult<MleMode> {
    match mode {
        "joint" => Ok(MleMode::Joint),
        "mean-only" => Ok(MleMode::MeanOnly),
        "cov-only" => Ok(MleMode::CovOnly),
        _ => Err(PyValueError::new_err(format!("mode must be 'joint', 'mean-only' or 'cov-only', got {mode:?}"))),
    }
}

/// Network predicting a mean and a full (or diagonal) covariance.
#[pyclass(module = "pycovfilt", from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_dim, output_dim, hidden = vec![64, 64], covariance = "full", dropout_rate = 0.1, seed = 0))]
    fn new(
        input_dim: usize,
        output_dim: usize,
        hidden: Vec<usize>,
        covariance: &str,
        dropout_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            hidden,
            dropout_rate,
            covariance: parse_kind(covariance)?,
            ..ModelConfig::new(input_dim, output_dim)
        };
        Ok(Self { inner: ModelParams::new(config, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ModelParams::load(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelParams::from_json(text).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.config.input_dim
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.config.output_dim
    }

    /// Number of correlation outputs, k(k-1)/2.
    #[getter]
    fn corr_dim(&self) -> usize {
        self.inner.config.corr_dim()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensor_names()
    }

    /// Deterministic means and covariances, one per input row.
    fn predict(&self, inputs: Rows) -> PyResult<(Rows, Vec<Rows>)> {
        Ok(split(self.inner.predict(&to_matrix(&inputs)?).map_err(err)?))
    }

    /// MC-dropout estimate per row: (mean, epistemic, aleatoric, predictive).
    #[pyo3(signature = (inputs, samples = epistemic::DEFAULT_SAMPLES, seed = 0))]
    fn predict_epistemic(
        &self,
        py: Python<'_>,
        inputs: Rows,
        samples: usize,
        seed: u64,
    ) -> PyResult<Vec<(Vec<f64>, Rows, Rows, Rows)>> {
        let x = to_matrix(&inputs)?;
        let est = py.detach(|| epistemic::predict_with_epistemic(&self.inner, &x, samples, seed)).map_err(err)?;
        Ok(est
            .into_iter()
            .map(|e| (e.mean_of_means, to_rows(&e.epistemic), to_rows(&e.aleatoric), to_rows(&e.predictive)))
            .collect())
    }

    /// Fit input/output standardization on a training set.
    fn fit_normalization(&mut self, inputs: Rows, labels: Rows) -> PyResult<()> {
        self.inner.fit_normalization(&to_matrix(&inputs)?, &to_matrix(&labels)?);
        Ok(())
    }

    /// Maximum-likelihood training; returns the per-epoch loss curve.
    #[pyo3(signature = (inputs, labels, epochs = 30, lr = 1e-3, batch_size = 64, mode = "joint", seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train_mle(
        &mut self,
        py: Python<'_>,
        inputs: Rows,
        labels: Rows,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        mode: &str,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let (x, y) = (to_matrix(&inputs)?, to_matrix(&labels)?);
        let mut cfg = MleConfig { mode: parse_mode(mode)?, epochs, batch_size, seed, ..MleConfig::default() };
        cfg.adam.lr = lr;
        let params = &mut self.inner;
        let report = py.detach(|| training::train_mle(params, &x, &y, &cfg)).map_err(err)?;
        Ok(report.loss_curve)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(input_dim={}, output_dim={}, hidden={:?}, covariance={:?})", c.input_dim, c.output_dim, c.hidden, c.covariance)
    }
}

/// Linear-Gaussian filter.
#[pyclass(module = "pycovfilt", from_py_object)]
#[derive(Clone)]
pub struct Filter {
    inner: FilterSpec,
}

#[pymethods]
impl Filter {
    /// General system with a Gaussian prior on the initial state.
    #[new]
    fn new(f: Rows, h: Rows, q: Rows, prior_mean: Vec<f64>, prior_cov: Rows) -> PyResult<Self> {
        let init = InitPolicy::Prior { mean: prior_mean, cov: to_matrix(&prior_cov)? };
        let spec = FilterSpec::new(to_matrix(&f)?, to_matrix(&h)?, to_matrix(&q)?, init).map_err(err)?;
        Ok(Self { inner: spec })
    }

    /// Constant-velocity model initialized from the first measurement.
    #[staticmethod]
    #[pyo3(signature = (dim, dt, accel_std = 0.0, velocity_std = kalman::DEFAULT_VELOCITY_STD, joseph = false))]
    fn constant_velocity(dim: usize, dt: f64, accel_std: f64, velocity_std: f64, joseph: bool) -> PyResult<Self> {
        let mut spec = FilterSpec::constant_velocity(dim, dt, accel_std).map_err(err)?;
        spec.init = InitPolicy::FirstMeasurement { unobserved_std: velocity_std };
        spec.joseph = joseph;
        Ok(Self { inner: spec })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn meas_dim(&self) -> usize {
        self.inner.meas_dim()
    }

    /// Posterior means and covariances after each measurement.
    fn run(&self, measurements: Rows, sigmas: Vec<Rows>) -> PyResult<(Rows, Vec<Rows>)> {
        let sigmas = sigmas.iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        let run = kalman::run_filter(&self.inner, &measurements, &sigmas).map_err(err)?;
        Ok(run.states.into_iter().map(|s| (s.z, to_rows(&s.p))).unzip())
    }

    /// Whether training on this state subset is well posed; returns
    /// `(ok, failing_rows)`.
    fn check_subset(&self, subset: Vec<usize>) -> (bool, Vec<usize>) {
        let c = kalman::check_subset_condition(&self.inner.h, &subset);
        (c.ok, c.failing_rows)
    }
}

/// Experiment configuration with the CLI's pipeline stages.
#[pyclass(module = "pycovfilt", from_py_object)]
#[derive(Clone)]
pub struct Experiment {
    inner: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.methods.iter().map(|m| m.name().to_string()).collect()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    /// Write train/test/ood track CSVs into `directory`; returns the track
    /// counts.
    fn generate(&self, py: Python<'_>, directory: PathBuf) -> PyResult<(usize, usize, usize)> {
        let data = py.detach(|| experiment::generate(&self.inner)).map_err(err)?;
        std::fs::create_dir_all(&directory).map_err(|e| err(e.into()))?;
        for (name, set) in [("train.csv", &data.train), ("test.csv", &data.test), ("ood.csv", &data.ood)] {
            simulator::save_tracks(directory.join(name), set).map_err(err)?;
        }
        Ok((data.train.len(), data.test.len(), data.ood.len()))
    }

    /// Fit the 2-D rainbow demo. Returns the fitted model and per point
    /// `(t, sample, true ellipse, predicted ellipse)` with ellipses as
    /// `(major, minor, angle)`.
    #[allow(clippy::type_complexity)]
    fn rainbow(&self, py: Python<'_>) -> PyResult<(Model, Vec<(f64, [f64; 2], (f64, f64, f64), (f64, f64, f64))>)> {
        let (params, fit) = py.detach(|| experiment::fit_rainbow(&self.inner)).map_err(err)?;
        let rows = fit
            .points
            .iter()
            .zip(&fit.predictions)
            .map(|(p, q)| (p.t, p.sample, experiment::ellipse(&p.sigma_true), experiment::ellipse(&q.covariance)))
            .collect();
        Ok((Model { inner: params }, rows))
    }
}

/// `½ rᵀΣ⁻¹r + ½ ln|Σ|` with gradients: `(loss, d_mean, d_sigma)`.
#[pyfunction]
fn gaussian_nll(mean: Vec<f64>, sigma: Rows, y: Vec<f64>) -> PyResult<(f64, Vec<f64>, Rows)> {
    let mut tape = Tape::new();
    let m = tape.param(linalg::row(&mean)).map_err(err)?;
    let s = tape.param(to_matrix(&sigma)?).map_err(err)?;
    let loss = losses::gaussian_nll(&mut tape, m, s, &linalg::row(&y)).map_err(err)?;
    tape.backward(loss.node).map_err(err)?;
    let dm = tape.grad(m).iter().copied().collect();
    Ok((loss.report.total, dm, to_rows(&tape.grad(s))))
}

/// Covariance from log-variances `s` and correlation logits `r`.
#[pyfunction]
#[pyo3(signature = (s, r, rho_scale = 0.99))]
fn assemble_covariance(s: Vec<f64>, r: Vec<f64>, rho_scale: f64) -> PyResult<Rows> {
    Ok(to_rows(&model::assemble_covariance_plain(&s, &r, rho_scale).map_err(err)?))
}

/// Smallest diagonal load from the jitter ladder: `(loaded, lambda)`.
#[pyfunction]
fn stabilize(sigma: Rows) -> PyResult<(Rows, f64)> {
    let (m, lambda) = linalg::stabilize(&to_matrix(&sigma)?).map_err(err)?;
    Ok((to_rows(&m), lambda))
}

/// Combine sampled predictions: `(mean, epistemic, aleatoric, predictive)`.
#[pyfunction]
fn combine_samples(means: Rows, covariances: Vec<Rows>) -> PyResult<(Vec<f64>, Rows, Rows, Rows)> {
    if means.len() != covariances.len() {
        return Err(PyValueError::new_err("means and covariances differ in length"));
    }
    let samples = means
        .into_iter()
        .zip(&covariances)
        .map(|(mean, c)| Ok(GaussianPrediction { mean, covariance: to_matrix(c)? }))
        .collect::<PyResult<Vec<_>>>()?;
    let e = epistemic::combine(&samples).map_err(err)?;
    Ok((e.mean_of_means, to_rows(&e.epistemic), to_rows(&e.aleatoric), to_rows(&e.predictive)))
}

#[pymodule]
fn pycovfilt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CovfiltError", m.py().get_type::<CovfiltError>())?;
    m.add_class::<Model>()?;
    m.add_class::<Filter>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(gaussian_nll, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(stabilize, m)?)?;
    m.add_function(wrap_pyfunction!(combine_samples, m)?)?;
    Ok(())
}
