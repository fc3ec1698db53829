//! Training objectives: full-covariance Gaussian NLL, its diagonal
//! restriction, and the filtered state-estimate error.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{assemble_covariance, HeadOutput};

/// Scalar loss with its parts. `total = quadratic + logdet`, each already
/// carrying its factor ½.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub quadratic: f64,
    pub logdet: f64,
    /// Largest diagonal load added by the jitter ladder.
    pub jitter_applied: f64,
    /// Number of covariances that needed a load.
    pub jittered: usize,
}

impl LossReport {
    fn accumulate(&mut self, other: &LossReport) {
        self.total += other.total;
        self.quadratic += other.quadratic;
        self.logdet += other.logdet;
        self.jitter_applied = self.jitter_applied.max(other.jitter_applied);
        self.jittered += other.jittered;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.total *= c;
        self.quadratic *= c;
        self.logdet *= c;
        self
    }
}

/// Loss node plus its report.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub node: Var,
    pub report: LossReport,
}

/// Run the jitter ladder on the value of `sigma` and add the chosen load as a
/// constant, so gradients flow through the loaded matrix.
pub fn stabilize_covariance(tape: &mut Tape, sigma: Var) -> Result<(Var, f64)> {
    let lambda = linalg::jitter_ladder(tape.value(sigma))?;
    if lambda == 0.0 {
        return Ok((sigma, 0.0));
    }
    let k = tape.value(sigma).nrows();
    let load = tape.constant(Matrix::identity(k, k) * lambda)?;
    Ok((tape.add(sigma, load)?, lambda))
}

fn residual(tape: &mut Tape, mean: Var, y: &Matrix) -> Result<Var> {
    if !linalg::all_finite(y) {
        return Err(Error::NonFinite("label".into()));
    }
    let y = tape.constant(y.clone())?;
    tape.sub(y, mean)
}

/// `½ rᵀ Σ⁻¹ r + ½ ln|Σ|` with `r = y − mean`; `mean` and `y` are `1 × k`.
/// The `(k/2) ln 2π` constant is omitted.
pub fn gaussian_nll(tape: &mut Tape, mean: Var, sigma: Var, y: &Matrix) -> Result<Loss> {
    let (sigma, jitter) = stabilize_covariance(tape, sigma)?;
    let r = residual(tape, mean, y)?;
    let rt = tape.transpose(r);
    let solved = tape.solve_spd(sigma, rt)?;
    let quad = tape.matmul(r, solved)?;
    let quad = tape.scale(quad, 0.5);
    let logdet = tape.logdet_spd(sigma)?;
    let logdet = tape.scale(logdet, 0.5);
    let node = tape.add(quad, logdet)?;
    let report = LossReport {
        total: tape.scalar(node),
        quadratic: tape.scalar(quad),
        logdet: tape.scalar(logdet),
        jitter_applied: jitter,
        jittered: usize::from(jitter > 0.0),
    };
    Ok(Loss { node, report })
}

/// Gaussian NLL with a diagonal covariance given by its variances
/// (`1 × k`, strictly positive).
pub fn diagonal_nll(tape: &mut Tape, mean: Var, variances: Var, y: &Matrix) -> Result<Loss> {
    let r = residual(tape, mean, y)?;
    let log_var = tape.ln(variances)?;
    let neg = tape.scale(log_var, -1.0);
    let precision = tape.exp(neg);
    let r2 = tape.hadamard(r, r)?;
    let weighted = tape.hadamard(r2, precision)?;
    let quad = tape.sum(weighted);
    let quad = tape.scale(quad, 0.5);
    let logdet = tape.sum(log_var);
    let logdet = tape.scale(logdet, 0.5);
    let node = tape.add(quad, logdet)?;
    let report = LossReport {
        total: tape.scalar(node),
        quadratic: tape.scalar(quad),
        logdet: tape.scalar(logdet),
        jitter_applied: 0.0,
        jittered: 0,
    };
    Ok(Loss { node, report })
}

/// Which likelihood a batch loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    Full,
    Diagonal,
}

/// Mean NLL over the rows of a batch of head outputs.
pub fn batch_nll(
    tape: &mut Tape,
    out: &HeadOutput<Var>,
    labels: &Matrix,
    likelihood: Likelihood,
    rho_scale: f64,
) -> Result<Loss> {
    batch_nll_with_offsets(tape, out, labels, likelihood, rho_scale, None)
}

/// [`batch_nll`] where row `i` is scored against `Σᵢ + offsets[i]`; the
/// offsets are constants (e.g. an epistemic term the head should not
/// reproduce).
pub fn batch_nll_with_offsets(
    tape: &mut Tape,
    out: &HeadOutput<Var>,
    labels: &Matrix,
    likelihood: Likelihood,
    rho_scale: f64,
    offsets: Option<&[Matrix]>,
) -> Result<Loss> {
    let rows = labels.nrows();
    let k = labels.ncols();
    let m = linalg::offdiag_len(k);
    if rows == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if offsets.is_some_and(|o| o.len() != rows) {
        return Err(Error::invalid("one covariance offset per row is required"));
    }
    let mut terms = Vec::with_capacity(rows);
    let mut report = LossReport::default();
    for i in 0..rows {
        let y = labels.rows(i, 1).into_owned();
        let mean = tape.slice(out.mean, i, 0, 1, k)?;
        let s = tape.slice(out.s, i, 0, 1, k)?;
        let offset = offsets.map(|o| &o[i]);
        let loss = match likelihood {
            Likelihood::Full => {
                let r = tape.slice(out.r, i, 0, 1, m)?;
                let mut sigma = assemble_covariance(tape, &s, Some(&r), rho_scale)?;
                if let Some(o) = offset {
                    let o = tape.constant(o.clone())?;
                    sigma = tape.add(sigma, o)?;
                }
                gaussian_nll(tape, mean, sigma, &y)?
            }
            Likelihood::Diagonal => {
                let mut var = tape.exp(s);
                if let Some(o) = offset {
                    let o = tape.constant(linalg::row(o.diagonal().as_slice()))?;
                    var = tape.add(var, o)?;
                }
                diagonal_nll(tape, mean, var, &y)?
            }
        };
        report.accumulate(&loss.report);
        terms.push(loss.node);
    }
    let total = tape.add_n(&terms)?;
    let node = tape.scale(total, 1.0 / rows as f64);
    Ok(Loss { node, report: report.scaled(1.0 / rows as f64) })
}

fn check_window(len: usize, truth_len: usize, subset: &[usize], n: usize, burn_in: usize) -> Result<()> {
    if len != truth_len {
        return Err(Error::invalid(format!("{len} estimates for {truth_len} true states")));
    }
    if len <= burn_in {
        return Err(Error::invalid(format!("sequence of {len} steps leaves no window after burn-in {burn_in}")));
    }
    if subset.is_empty() {
        return Err(Error::invalid("empty state subset"));
    }
    if let Some(bad) = subset.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("state index {bad} out of range for dimension {n}")));
    }
    Ok(())
}

/// Mean squared state error over the indices in `subset` and the steps after
/// the first `burn_in`. `estimates[t]` is the `n × 1` posterior after
/// measurement `t + 1`; `truth[t]` the matching true state.
pub fn state_estimate_loss(
    tape: &mut Tape,
    estimates: &[Var],
    truth: &[Vec<f64>],
    subset: &[usize],
    burn_in: usize,
) -> Result<Var> {
    let n = estimates.first().map(|v| tape.value(*v).nrows()).unwrap_or(0);
    check_window(estimates.len(), truth.len(), subset, n, burn_in)?;
    let mut select = Matrix::zeros(subset.len(), n);
    for (row, &i) in subset.iter().enumerate() {
        select[(row, i)] = 1.0;
    }
    let select = tape.constant(select)?;
    let mut terms = Vec::new();
    for (est, z) in estimates.iter().zip(truth).skip(burn_in) {
        let z = tape.constant(linalg::column(z))?;
        let diff = tape.sub(*est, z)?;
        let picked = tape.matmul(select, diff)?;
        let sq = tape.hadamard(picked, picked)?;
        terms.push(tape.sum(sq));
    }
    let count = (terms.len() * subset.len()) as f64;
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, 1.0 / count))
}

/// [`state_estimate_loss`] on plain values.
pub fn state_estimate_error(estimates: &[Vec<f64>], truth: &[Vec<f64>], subset: &[usize], burn_in: usize) -> Result<f64> {
    let n = estimates.first().map(Vec::len).unwrap_or(0);
    check_window(estimates.len(), truth.len(), subset, n, burn_in)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (est, z) in estimates.iter().zip(truth).skip(burn_in) {
        for &i in subset {
            total += (est[i] - z[i]).powi(2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix {
        linalg::row(v)
    }

    fn nll(mean: &[f64], sigma: Matrix, y: &[f64]) -> LossReport {
        let mut t = Tape::new();
        let m = t.param(row(mean)).unwrap();
        let s = t.param(sigma).unwrap();
        gaussian_nll(&mut t, m, s, &row(y)).unwrap().report
    }

    #[test]
    fn gaussian_nll_examples() {
        assert_eq!(nll(&[0.3], Matrix::identity(1, 1), &[0.3]).total, 0.0);
        let r = nll(&[0.0, 0.0], Matrix::identity(2, 2), &[1.0, 1.0]);
        assert!((r.total - 1.0).abs() < 1e-15);
        // σ² = (1, 1), ρ = 0.5, r = (1, 1): quadratic ½·4/3, log-det ½·ln 0.75.
        let sigma = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let r = nll(&[0.0, 0.0], sigma, &[1.0, 1.0]);
        let expected = 0.5 * (4.0 / 3.0) + 0.5 * 0.75f64.ln();
        assert!((r.total - expected).abs() < 1e-14);
        assert_eq!(r.total, r.quadratic + r.logdet);
    }

    #[test]
    fn diagonal_examples() {
        let mut t = Tape::new();
        let m = t.param(row(&[0.0])).unwrap();
        let v = t.param(row(&[1.0])).unwrap();
        let l = diagonal_nll(&mut t, m, v, &row(&[2.0])).unwrap();
        assert_eq!(l.report.total, 2.0);
    }

    #[test]
    fn jitter_is_reported() {
        let v = linalg::column(&[1.0, 1.0, 1.0]);
        let singular = &v * v.transpose();
        let r = nll(&[0.0; 3], singular, &[0.1, 0.1, 0.1]);
        assert!(r.jitter_applied > 0.0);
        assert!(r.total.is_finite());
    }

    #[test]
    fn indefinite_covariance_fails_after_ladder() {
        let mut t = Tape::new();
        let m = t.param(row(&[0.0, 0.0])).unwrap();
        let s = t.param(Matrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0])).unwrap();
        assert!(matches!(
            gaussian_nll(&mut t, m, s, &row(&[0.0, 0.0])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn state_loss_examples() {
        let truth = vec![vec![1.0, 2.0]; 5];
        let mut t = Tape::new();
        let est: Vec<Var> = truth.iter().map(|z| t.param(linalg::column(z)).unwrap()).collect();
        let l = state_estimate_loss(&mut t, &est, &truth, &[0, 1], 2).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let delta = 0.3;
        let shifted: Vec<Vec<f64>> = truth.iter().map(|z| vec![z[0] + delta, z[1]]).collect();
        let mut t = Tape::new();
        let est: Vec<Var> = shifted.iter().map(|z| t.param(linalg::column(z)).unwrap()).collect();
        let l = state_estimate_loss(&mut t, &est, &truth, &[0, 1], 2).unwrap();
        assert!((t.scalar(l) - delta * delta / 2.0).abs() < 1e-15);
        let plain = state_estimate_error(&shifted, &truth, &[0, 1], 2).unwrap();
        assert_eq!(plain, t.scalar(l));
    }

    #[test]
    fn state_loss_rejects_empty_window() {
        let truth = vec![vec![0.0]; 2];
        assert!(state_estimate_error(&truth, &truth, &[0], 2).is_err());
        assert!(state_estimate_error(&truth, &truth, &[], 0).is_err());
        assert!(state_estimate_error(&truth, &truth, &[3], 0).is_err());
    }
}
