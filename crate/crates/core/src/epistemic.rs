//! Monte-Carlo dropout: sample the model under random masks and combine the
//! spread of the sampled means with the average predicted covariance,
//!
//! ```text
//! Σ_pred = (1/N) Σ fₙfₙᵀ − (1/N²)(Σ fₙ)(Σ fₙ)ᵀ + (1/N) Σ Σₙ
//! ```
//!
//! The first two terms are evaluated in the centred form
//! `(1/N) Σ (fₙ − f̄)(fₙ − f̄)ᵀ`, which is the same quantity without the
//! cancellation.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GaussianPrediction, ModelParams};
use crate::rng::Rng;

/// Default number of dropout passes.
pub const DEFAULT_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct EpistemicEstimate {
    pub mean_of_means: Vec<f64>,
    pub epistemic: Matrix,
    pub aleatoric: Matrix,
    /// `epistemic + aleatoric`.
    pub predictive: Matrix,
    pub samples: usize,
}

impl EpistemicEstimate {
    /// Same estimate with every off-diagonal entry zeroed.
    pub fn diagonal(&self) -> Self {
        let keep = |m: &Matrix| Matrix::from_diagonal(&m.diagonal());
        let epistemic = keep(&self.epistemic);
        let aleatoric = keep(&self.aleatoric);
        let predictive = &epistemic + &aleatoric;
        Self { mean_of_means: self.mean_of_means.clone(), epistemic, aleatoric, predictive, samples: self.samples }
    }
}

fn cmp_sample(a: &GaussianPrediction, b: &GaussianPrediction) -> Ordering {
    let key = |p: &GaussianPrediction| p.mean.iter().chain(p.covariance.iter()).copied().collect::<Vec<f64>>();
    key(a)
        .iter()
        .zip(key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Combine sampled predictions. Samples are put in a canonical order before
/// summation, so the result does not depend on the order they arrive in.
pub fn combine(samples: &[GaussianPrediction]) -> Result<EpistemicEstimate> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("at least one sample is required"));
    };
    let k = first.mean.len();
    if samples.iter().any(|s| s.mean.len() != k || s.covariance.shape() != (k, k)) {
        return Err(Error::invalid("samples disagree in dimension"));
    }
    let mut ordered: Vec<&GaussianPrediction> = samples.iter().collect();
    ordered.sort_by(|a, b| cmp_sample(a, b));
    let n = samples.len() as f64;
    // Deviations from the first sample keep identical passes exactly zero.
    let origin = &ordered[0].mean;
    let dev: Vec<Vec<f64>> = ordered.iter().map(|s| s.mean.iter().zip(origin).map(|(a, o)| a - o).collect()).collect();
    let mut shift = vec![0.0; k];
    let mut aleatoric = Matrix::zeros(k, k);
    for (d, s) in dev.iter().zip(&ordered) {
        for (m, v) in shift.iter_mut().zip(d) {
            *m += v;
        }
        aleatoric += &s.covariance;
    }
    shift.iter_mut().for_each(|m| *m /= n);
    aleatoric /= n;
    let mut epistemic = Matrix::zeros(k, k);
    for d in &dev {
        for i in 0..k {
            for j in 0..k {
                epistemic[(i, j)] += (d[i] - shift[i]) * (d[j] - shift[j]);
            }
        }
    }
    epistemic /= n;
    let mean: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s).collect();
    let predictive = &epistemic + &aleatoric;
    Ok(EpistemicEstimate { mean_of_means: mean, epistemic, aleatoric, predictive, samples: samples.len() })
}

/// `samples` dropout passes over all rows of `inputs`; pass `i` draws its
/// masks from stream `i` of `seed`. One estimate per row.
pub fn predict_with_epistemic(
    params: &ModelParams,
    inputs: &Matrix,
    samples: usize,
    seed: u64,
) -> Result<Vec<EpistemicEstimate>> {
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let passes: Vec<Vec<GaussianPrediction>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let masks = params.sample_dropout_masks_with(inputs.nrows(), &mut Rng::stream(seed, i as u64));
            params.predict_with_masks(inputs, Some(&masks))
        })
        .collect::<Result<_>>()?;
    (0..inputs.nrows())
        .map(|row| {
            let per_row: Vec<GaussianPrediction> = passes.iter().map(|p| p[row].clone()).collect();
            combine(&per_row)
        })
        .collect()
}

/// Single deterministic pass (dropout off).
pub fn predict_aleatoric_only(params: &ModelParams, inputs: &Matrix) -> Result<Vec<GaussianPrediction>> {
    params.predict(inputs)
}
