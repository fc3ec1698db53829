//! On-disk layout, manifests and model-set persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use covfilt::experiment::{CovarianceModel, ExperimentConfig, Method};
use covfilt::kalman::TimeCorrelation;
use covfilt::linalg::Matrix;
use covfilt::model::ModelParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const TRAIN: &str = "train.csv";
pub const TEST: &str = "test.csv";
pub const OOD: &str = "ood.csv";
pub const MEAN_MODEL: &str = "mean.json";
pub const FIXED: &str = "fixed-covariance.json";
pub const CORRELATION: &str = "time-correlation.json";
pub const MANIFEST: &str = "manifest.json";

pub struct Layout {
    pub data: PathBuf,
    pub models: PathBuf,
    pub eval: PathBuf,
    pub rainbow: PathBuf,
}

impl Layout {
    pub fn new(out: &Path, cfg: &ExperimentConfig) -> Self {
        Self {
            data: cfg.paths.data.clone().unwrap_or_else(|| out.join("data")),
            models: cfg.paths.models.clone().unwrap_or_else(|| out.join("models")),
            eval: out.join("eval"),
            rainbow: out.join("rainbow"),
        }
    }
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("cannot create {}: {e}", dir.display())))
}

pub fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::new("missing-input", format!("{what} not found at {}; run the earlier stage first", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::new("io", format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// The full resolved configuration, so the stage can be rerun from
    /// this file alone.
    pub config: String,
    pub files: BTreeMap<String, String>,
}

/// Hash every listed file of `dir` and write the stage manifest.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, files: &[String]) -> Result<(), Failure> {
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.clone(), sha256_file(&dir.join(f))?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        config: cfg.to_toml()?,
        files: hashes,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn model_file(method: Method) -> String {
    format!("{}.json", method.name())
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix, Failure> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Failure::new("parse", "fixed covariance must be a square matrix"));
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Write each method's model; returns the file names written.
pub fn save_models(
    dir: &Path,
    base: &ModelParams,
    models: &BTreeMap<Method, CovarianceModel>,
    correlation: &TimeCorrelation,
) -> Result<Vec<String>, Failure> {
    let mut files = vec![MEAN_MODEL.to_string()];
    base.save(dir.join(MEAN_MODEL))?;
    for (&method, model) in models {
        match model {
            CovarianceModel::Fixed { sigma, .. } => {
                fs::write(dir.join(FIXED), serde_json::to_string_pretty(&matrix_rows(sigma))? + "\n")?;
                files.push(FIXED.to_string());
            }
            CovarianceModel::Learned(p) => {
                let name = model_file(method);
                p.save(dir.join(&name))?;
                files.push(name);
            }
        }
    }
    fs::write(dir.join(CORRELATION), serde_json::to_string_pretty(correlation)? + "\n")?;
    files.push(CORRELATION.to_string());
    Ok(files)
}

pub fn load_models(dir: &Path, methods: &[Method]) -> Result<BTreeMap<Method, CovarianceModel>, Failure> {
    let mean_path = dir.join(MEAN_MODEL);
    require(&mean_path, "mean model")?;
    let base = ModelParams::load(&mean_path)?;
    let mut out = BTreeMap::new();
    for &m in methods {
        let model = match m {
            Method::Fixed => {
                let path = dir.join(FIXED);
                require(&path, "fixed covariance")?;
                let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(&path)?)?;
                CovarianceModel::Fixed { mean: base.clone(), sigma: matrix_from_rows(&rows)? }
            }
            _ => {
                let path = dir.join(model_file(m));
                require(&path, &format!("{m} model"))?;
                CovarianceModel::Learned(ModelParams::load(&path)?)
            }
        };
        out.insert(m, model);
    }
    Ok(out)
}

pub fn load_correlation(dir: &Path) -> Result<TimeCorrelation, Failure> {
    let path = dir.join(CORRELATION);
    require(&path, "time-correlation estimate")?;
    Ok(serde_json::from_str(&fs::read_to_string(&path)?)?)
}
