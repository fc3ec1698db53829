//! Oracles shared by the integration and acceptance tests. Each one is
//! computed independently of the code under test.
#![allow(dead_code)]

use covfilt::autodiff::{Tape, Var};
use covfilt::kalman::{FilterSpec, InitPolicy, TimeCorrelation};
use covfilt::losses;
use covfilt::rng::Rng;
use covfilt::{Matrix, Result};

pub const FD_STEP: f64 = 1e-5;

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Well-conditioned SPD matrix: `AAᵀ/k + floor·I`.
pub fn random_spd(rng: &mut Rng, k: usize, floor: f64) -> Matrix {
    let a = random_matrix(rng, k, k);
    &a * a.transpose() / k as f64 + Matrix::identity(k, k) * floor
}

/// An input to a finite-difference check. Symmetric inputs are perturbed
/// in mirrored pairs, so the matching analytic derivative is `G + Gᵀ`
/// off the diagonal.
pub struct FdInput {
    pub value: Matrix,
    pub symmetric: bool,
}

impl FdInput {
    pub fn plain(value: Matrix) -> Self {
        Self { value, symmetric: false }
    }

    pub fn symmetric(value: Matrix) -> Self {
        Self { value, symmetric: true }
    }
}

/// Relative error `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)` over
/// every input entry, with central differences at [`FD_STEP`].
pub fn fd_relative_error(
    inputs: &[FdInput],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|v| tape.param(v.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|i| tape.param(i.value.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let grads: Vec<Matrix> = vars.iter().map(|v| tape.grad(*v)).collect();

    let base: Vec<Matrix> = inputs.iter().map(|i| i.value.clone()).collect();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (idx, input) in inputs.iter().enumerate() {
        let (rows, cols) = input.value.shape();
        for i in 0..rows {
            for j in 0..cols {
                if input.symmetric && j < i {
                    continue;
                }
                let perturbed = |h: f64| {
                    let mut v = base.clone();
                    v[idx][(i, j)] += h;
                    if input.symmetric && i != j {
                        v[idx][(j, i)] += h;
                    }
                    v
                };
                let fd = (eval(&perturbed(FD_STEP))? - eval(&perturbed(-FD_STEP))?) / (2.0 * FD_STEP);
                let g = &grads[idx];
                let analytic = if input.symmetric && i != j { g[(i, j)] + g[(j, i)] } else { g[(i, j)] };
                diff += (analytic - fd).powi(2);
                na += analytic * analytic;
                nf += fd * fd;
            }
        }
    }
    let scale = na.sqrt().max(nf.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

/// Random Gaussian NLL instance: `(mean, Σ, y)` with `mean`, `y` as rows.
pub fn nll_instance(rng: &mut Rng) -> (Matrix, Matrix, Matrix) {
    let k = 1 + (rng.uniform() * 4.0) as usize;
    let mean = random_matrix(rng, 1, k);
    let sigma = random_spd(rng, k, 0.3);
    let y = random_matrix(rng, 1, k);
    (mean, sigma, y)
}

pub fn nll_gradient_error(rng: &mut Rng) -> Result<f64> {
    let (mean, sigma, y) = nll_instance(rng);
    fd_relative_error(&[FdInput::plain(mean), FdInput::symmetric(sigma)], |t, v| {
        Ok(losses::gaussian_nll(t, v[0], v[1], &y)?.node)
    })
}

pub fn diagonal_nll_gradient_error(rng: &mut Rng) -> Result<f64> {
    let k = 1 + (rng.uniform() * 4.0) as usize;
    let mean = random_matrix(rng, 1, k);
    let var = Matrix::from_fn(1, k, |_, _| 0.2 + rng.uniform() * 3.0);
    let y = random_matrix(rng, 1, k);
    fd_relative_error(&[FdInput::plain(mean), FdInput::plain(var)], |t, v| {
        Ok(losses::diagonal_nll(t, v[0], v[1], &y)?.node)
    })
}

/// State-estimate loss through five filter steps of a random
/// constant-velocity system, differentiated with respect to every
/// measurement and covariance.
pub fn filter_gradient_error(rng: &mut Rng) -> Result<f64> {
    filter_gradient_error_with(rng, false)
}

/// As [`filter_gradient_error`], through the time-correlated filter with a
/// random AR(1) model.
pub fn correlated_filter_gradient_error(rng: &mut Rng) -> Result<f64> {
    filter_gradient_error_with(rng, true)
}

fn filter_gradient_error_with(rng: &mut Rng, correlated: bool) -> Result<f64> {
    let dim = 1 + (rng.uniform() * 3.0) as usize;
    let dt = 0.1 + rng.uniform();
    let accel = rng.uniform() * 2.0;
    let mut spec = FilterSpec::constant_velocity(dim, dt, accel)?;
    spec.init = InitPolicy::FirstMeasurement { unobserved_std: 1.0 + rng.uniform() * 3.0 };
    let steps = 5;
    let velocity: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let truth: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let mut z: Vec<f64> = velocity.iter().map(|v| v * dt * t as f64).collect();
            z.extend(&velocity);
            z
        })
        .collect();
    let mut inputs = Vec::new();
    for z in &truth {
        inputs.push(FdInput::plain(Matrix::from_fn(dim, 1, |i, _| z[i] + 0.3 * rng.normal())));
    }
    for _ in 0..steps {
        inputs.push(FdInput::symmetric(random_spd(rng, dim, 0.05) * 0.2));
    }
    let tc = correlated.then(|| TimeCorrelation {
        phi: (0..dim).map(|_| rng.uniform() * 0.95).collect(),
        share: rng.uniform() * 0.9,
    });
    let subset: Vec<usize> = (0..2 * dim).collect();
    fd_relative_error(&inputs, |t, v| {
        let est = match &tc {
            None => covfilt::kalman::run_filter_diff(t, &spec, &v[..steps], &v[steps..], None)?,
            Some(tc) => covfilt::kalman::run_filter_time_correlated_diff(t, &spec, tc, &v[..steps], &v[steps..], None)?,
        };
        losses::state_estimate_loss(t, &est, &truth, &subset, 2)
    })
}

/// A random linear-Gaussian system with a Gaussian prior and invertible
/// process noise, plus a simulated measurement sequence.
pub struct LinearSystem {
    pub spec: FilterSpec,
    pub measurements: Vec<Vec<f64>>,
    pub sigmas: Vec<Matrix>,
}

pub fn random_system(rng: &mut Rng, steps: usize) -> Result<LinearSystem> {
    let n = 1 + (rng.uniform() * 4.0) as usize;
    let k = 1 + (rng.uniform() * 3.0) as usize;
    let f = Matrix::identity(n, n) + random_matrix(rng, n, n) * 0.3;
    let h = random_matrix(rng, k, n);
    let q = random_spd(rng, n, 0.1) * 0.2;
    let mean: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let cov = random_spd(rng, n, 0.5);
    let spec = FilterSpec::new(f, h, q, InitPolicy::Prior { mean, cov })?;
    let measurements = (0..steps).map(|_| (0..k).map(|_| rng.normal() * 2.0).collect()).collect();
    let sigmas = (0..steps).map(|_| random_spd(rng, k, 0.2)).collect();
    Ok(LinearSystem { spec, measurements, sigmas })
}

/// Posterior of the last state given the first `t` measurements, from the
/// joint information matrix over `z₀ … z_t` solved in one dense step.
pub fn information_form_posterior(sys: &LinearSystem, t: usize) -> (Vec<f64>, Matrix) {
    let spec = &sys.spec;
    let n = spec.state_dim();
    let InitPolicy::Prior { mean, cov } = &spec.init else { panic!("oracle needs a prior") };
    let dim = n * (t + 1);
    let mut info = Matrix::zeros(dim, dim);
    let mut vec = Matrix::zeros(dim, 1);
    let p0_inv = cov.clone().try_inverse().unwrap();
    let m0 = Matrix::from_column_slice(n, 1, mean);
    add_block(&mut info, (0, 0), &p0_inv);
    add_block(&mut vec, (0, 0), &(&p0_inv * m0));
    let q_inv = spec.q.clone().try_inverse().unwrap();
    // Dynamics residual z_s − F z_{s−1} = [−F  I] [z_{s−1}; z_s].
    let mut block = Matrix::zeros(n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-&spec.f));
    block.view_mut((0, n), (n, n)).copy_from(&Matrix::identity(n, n));
    let dyn_info = block.transpose() * &q_inv * &block;
    for s in 1..=t {
        add_block(&mut info, ((s - 1) * n, (s - 1) * n), &dyn_info);
        let r_inv = sys.sigmas[s - 1].clone().try_inverse().unwrap();
        let m = Matrix::from_column_slice(r_inv.nrows(), 1, &sys.measurements[s - 1]);
        add_block(&mut info, (s * n, s * n), &(spec.h.transpose() * &r_inv * &spec.h));
        add_block(&mut vec, (s * n, 0), &(spec.h.transpose() * &r_inv * m));
    }
    let joint_cov = info.try_inverse().expect("information matrix is invertible");
    let joint_mean = &joint_cov * vec;
    let last = t * n;
    let z = joint_mean.rows(last, n).iter().copied().collect();
    let p = joint_cov.view((last, last), (n, n)).into_owned();
    (z, p)
}

fn add_block(m: &mut Matrix, at: (usize, usize), b: &Matrix) {
    let mut v = m.view_mut(at, b.shape());
    v += b;
}

/// Largest entrywise difference relative to the largest magnitude.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut log_c = 0.0f64;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    total
}
