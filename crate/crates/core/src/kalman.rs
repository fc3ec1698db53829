//! Linear Kalman filter with a fused predict/update step, written once
//! against [`Backend`] so the evaluation path and the differentiable training
//! path run the same arithmetic.
//!
//! Step, with prior `(ẑ, P)`, measurement `m` and its covariance `Σ`:
//!
//! ```text
//! P⁻ = F P Fᵀ + Q
//! i  = m − H F ẑ
//! S  = Σ + H P⁻ Hᵀ
//! K  = P⁻ Hᵀ S⁻¹
//! ẑ′ = F ẑ + K i
//! P′ = sym((I − K H) P⁻)
//! ```
//!
//! The time-correlated variant augments the state with the measurement bias
//! `b` (`b_t = Φ b_{t−1} + η_t`) and filters `[z; b]` with only the
//! uncorrelated part of `Σ` as measurement noise.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backend::{Backend, Plain};
use crate::error::{Error, Result};
use crate::linalg::{self, shape, Matrix};

/// How the filter turns the first measurement (or a prior) into a state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    /// Observed states come from the first measurement through the
    /// pseudo-inverse of `H`'s observed columns; unobserved states start at
    /// zero with standard deviation `unobserved_std`. The first measurement
    /// is consumed by initialization.
    FirstMeasurement { unobserved_std: f64 },
    /// Gaussian prior on the state before the first measurement; every
    /// measurement goes through a full step.
    Prior { mean: Vec<f64>, cov: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub f: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub init: InitPolicy,
    /// Joseph-form covariance update.
    pub joseph: bool,
}

/// Default spread of unobserved velocities, mm/s.
pub const DEFAULT_VELOCITY_STD: f64 = 200.0;

impl FilterSpec {
    pub fn new(f: Matrix, h: Matrix, q: Matrix, init: InitPolicy) -> Result<Self> {
        let spec = Self { f, h, q, init, joseph: false };
        spec.validate()?;
        Ok(spec)
    }

    /// Constant-velocity model in `dim` dimensions with state
    /// `[position; velocity]`, position-only measurements, and white
    /// acceleration noise of spectral density `accel_std²` (zero gives
    /// `Q = 0`).
    pub fn constant_velocity(dim: usize, dt: f64, accel_std: f64) -> Result<Self> {
        let n = 2 * dim;
        let mut f = Matrix::identity(n, n);
        let mut h = Matrix::zeros(dim, n);
        let mut q = Matrix::zeros(n, n);
        let q2 = accel_std * accel_std;
        for i in 0..dim {
            f[(i, dim + i)] = dt;
            h[(i, i)] = 1.0;
            q[(i, i)] = q2 * dt.powi(3) / 3.0;
            q[(i, dim + i)] = q2 * dt.powi(2) / 2.0;
            q[(dim + i, i)] = q2 * dt.powi(2) / 2.0;
            q[(dim + i, dim + i)] = q2 * dt;
        }
        Self::new(f, h, q, InitPolicy::FirstMeasurement { unobserved_std: DEFAULT_VELOCITY_STD })
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f.nrows();
        let bad = |what: &str| Err(Error::invalid(format!("filter spec: {what}")));
        if n == 0 || self.f.ncols() != n {
            return bad("F must be square and non-empty");
        }
        if self.h.ncols() != n || self.h.nrows() == 0 {
            return bad("H must be k × n");
        }
        if shape(&self.q) != (n, n) {
            return bad("Q must be n × n");
        }
        for m in [&self.f, &self.h, &self.q] {
            if !linalg::all_finite(m) {
                return Err(Error::NonFinite("filter spec".into()));
            }
        }
        check_psd(&self.q, "Q")?;
        match &self.init {
            InitPolicy::FirstMeasurement { unobserved_std } => {
                if !(*unobserved_std > 0.0) || !unobserved_std.is_finite() {
                    return bad("unobserved_std must be positive");
                }
            }
            InitPolicy::Prior { mean, cov } => {
                if mean.len() != n || shape(cov) != (n, n) {
                    return bad("prior has wrong dimension");
                }
                check_psd(cov, "P0")?;
            }
        }
        Ok(())
    }

    /// State indices with a nonzero column in `H`.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.state_dim()).filter(|&j| self.h.column(j).iter().any(|v| *v != 0.0)).collect()
    }
}

fn check_psd(a: &Matrix, name: &str) -> Result<()> {
    let a = linalg::checked_symmetric(a)?;
    let floor = -1e-12 * a.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let eig = a.symmetric_eigenvalues();
    if eig.iter().any(|&e| e < floor) {
        return Err(Error::invalid(format!("{name} is not positive semi-definite")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub z: Vec<f64>,
    pub p: Matrix,
    /// Number of measurements consumed.
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub innovation: Vec<f64>,
    pub s: Matrix,
    pub gain: Matrix,
    pub posterior: FilterState,
}

/// Output of a plain run: one posterior per measurement, plus a trace for
/// every measurement that went through a full step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub states: Vec<FilterState>,
    pub traces: Vec<StepTrace>,
}

/// Result of [`check_subset_condition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetCheck {
    pub ok: bool,
    /// Measurement rows whose column sum over the subset is zero.
    pub failing_rows: Vec<usize>,
}

impl SubsetCheck {
    pub fn diagnostic(&self) -> String {
        if self.ok {
            "every measurement row touches the subset".into()
        } else {
            format!("rows {:?} of H have zero sum over the subset", self.failing_rows)
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.ok {
            Ok(())
        } else {
            Err(Error::SubsetCondition(self.diagnostic()))
        }
    }
}

/// True iff `Σ_{b∈S} H[a][b] ≠ 0` for every row `a` (0-based indices).
pub fn check_subset_condition(h: &Matrix, subset: &[usize]) -> SubsetCheck {
    let failing_rows: Vec<usize> = (0..h.nrows())
        .filter(|&a| {
            let s: f64 = subset.iter().filter(|&&b| b < h.ncols()).map(|&b| h[(a, b)]).sum();
            s == 0.0
        })
        .collect();
    let in_range = !subset.is_empty() && subset.iter().all(|&b| b < h.ncols());
    SubsetCheck { ok: in_range && failing_rows.is_empty(), failing_rows }
}

struct System<M> {
    f: M,
    ft: M,
    h: M,
    ht: M,
    eye: M,
}

fn lift_system<B: Backend>(b: &mut B, f: &Matrix, h: &Matrix) -> Result<System<B::M>> {
    let n = f.nrows();
    Ok(System {
        f: b.lift(f.clone())?,
        ft: b.lift(f.transpose())?,
        h: b.lift(h.clone())?,
        ht: b.lift(h.transpose())?,
        eye: b.lift(Matrix::identity(n, n))?,
    })
}

/// One fused step on any backend. `z` is `n × 1`, `m` is `k × 1`.
struct Step<M> {
    z: M,
    p: M,
    innovation: M,
    s: M,
    gain: M,
}

#[allow(clippy::too_many_arguments)]
fn step_core<B: Backend>(
    b: &mut B,
    sys: &System<B::M>,
    q: &B::M,
    z: &B::M,
    p: &B::M,
    m: &B::M,
    sigma: &B::M,
    joseph: bool,
) -> Result<Step<B::M>> {
    let zp = b.matmul(&sys.f, z)?;
    let fpf = b.matmul3(&sys.f, p, &sys.ft)?;
    let pp = b.add(&fpf, q)?;
    let hz = b.matmul(&sys.h, &zp)?;
    let innovation = b.sub(m, &hz)?;
    let hp = b.matmul(&sys.h, &pp)?;
    let hph = b.matmul(&hp, &sys.ht)?;
    let s = b.add(sigma, &hph)?;
    let s = b.symmetrize(&s)?;
    // Kᵀ = S⁻¹ H P⁻, using the symmetry of P⁻.
    let kt = b.solve_spd(&s, &hp)?;
    let gain = b.transpose(&kt);
    let correction = b.matmul(&gain, &innovation)?;
    let z_new = b.add(&zp, &correction)?;
    let p_new = if joseph {
        let kh = b.matmul(&gain, &sys.h)?;
        let a = b.sub(&sys.eye, &kh)?;
        let at = b.transpose(&a);
        let apa = b.matmul3(&a, &pp, &at)?;
        let ksk = b.matmul3(&gain, sigma, &kt)?;
        b.add(&apa, &ksk)?
    } else {
        let khp = b.matmul(&gain, &hp)?;
        b.sub(&pp, &khp)?
    };
    let p_new = b.symmetrize(&p_new)?;
    Ok(Step { z: z_new, p: p_new, innovation, s, gain })
}

fn check_inputs(spec: &FilterSpec, ms: &[Matrix], sigmas: &[Matrix]) -> Result<()> {
    if ms.is_empty() {
        return Err(Error::invalid("empty measurement sequence"));
    }
    if ms.len() != sigmas.len() {
        return Err(Error::invalid(format!("{} measurements but {} covariances", ms.len(), sigmas.len())));
    }
    let k = spec.meas_dim();
    for (t, (m, s)) in ms.iter().zip(sigmas).enumerate() {
        if shape(m) != (k, 1) || shape(s) != (k, k) {
            return Err(Error::invalid(format!("step {t}: measurement or covariance has wrong shape")));
        }
    }
    Ok(())
}

/// `G` with `ẑ₀ = G m₀`: pseudo-inverse of `H` restricted to its observed
/// columns, embedded back into the state.
fn first_measurement_gain(spec: &FilterSpec) -> Result<Matrix> {
    let observed = spec.observed_indices();
    let mut embed = Matrix::zeros(spec.state_dim(), observed.len());
    for (c, &j) in observed.iter().enumerate() {
        embed[(j, c)] = 1.0;
    }
    Ok(&embed * linalg::pseudo_inverse(&(&spec.h * &embed))?)
}

/// Initial state from the first measurement: `(ẑ, P, consumed)`.
fn initialize<B: Backend>(
    b: &mut B,
    spec: &FilterSpec,
    m0: &B::M,
    sigma0: &B::M,
) -> Result<(B::M, B::M, bool)> {
    match &spec.init {
        InitPolicy::Prior { mean, cov } => Ok((b.lift(linalg::column(mean))?, b.lift(cov.clone())?, false)),
        InitPolicy::FirstMeasurement { unobserved_std } => {
            let n = spec.state_dim();
            let observed = spec.observed_indices();
            let g = first_measurement_gain(spec)?;
            let mut unobserved = Matrix::identity(n, n) * unobserved_std.powi(2);
            for &j in &observed {
                unobserved[(j, j)] = 0.0;
            }
            let g_m = b.lift(g.clone())?;
            let gt = b.lift(g.transpose())?;
            let z = b.matmul(&g_m, m0)?;
            let p = b.matmul3(&g_m, sigma0, &gt)?;
            let p = b.add_const(&p, unobserved)?;
            let p = b.symmetrize(&p)?;
            Ok((z, p, true))
        }
    }
}

/// Lifted constants of the time-correlated filter: the bias block is
/// embedded into the augmented state by `E_b` and the physical state by
/// `E_z`.
struct Augmentation<M> {
    ez: M,
    ezt: M,
    eb: M,
    ebt: M,
    drive: M,
    q_pad: Matrix,
    share: f64,
}

fn lift_augmentation<B: Backend>(b: &mut B, spec: &FilterSpec, tc: &TimeCorrelation) -> Result<Augmentation<B::M>> {
    let n = spec.state_dim();
    let k = spec.meas_dim();
    let mut ez = Matrix::zeros(n + k, n);
    ez.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
    let mut eb = Matrix::zeros(n + k, k);
    eb.view_mut((n, 0), (k, k)).copy_from(&Matrix::identity(k, k));
    Ok(Augmentation {
        ezt: b.lift(ez.transpose())?,
        ez: b.lift(ez)?,
        ebt: b.lift(eb.transpose())?,
        eb: b.lift(eb)?,
        drive: b.lift(tc.drive())?,
        q_pad: linalg::block_diag(&spec.q, &Matrix::zeros(k, k)),
        share: tc.share,
    })
}

impl<M> Augmentation<M> {
    /// Process noise with the bias driving noise, and the uncorrelated
    /// measurement covariance: `(blockdiag(Q, D γΣ D), (1 − γ)Σ)`.
    fn noise<B: Backend<M = M>>(&self, b: &mut B, sigma: &M) -> Result<(M, M)> {
        let sigma_c = b.scale(sigma, self.share);
        let q_b = b.matmul3(&self.drive, &sigma_c, &self.drive)?;
        let q_b = b.matmul3(&self.eb, &q_b, &self.ebt)?;
        let q = b.add_const(&q_b, self.q_pad.clone())?;
        Ok((q, b.scale(sigma, 1.0 - self.share)))
    }

    /// Augmented initial state `[z; 0]` with the bias prior `γΣ₀`. Under
    /// [`InitPolicy::FirstMeasurement`] the position error inherits the first
    /// bias, so `P_zb = −G γΣ₀`.
    fn initialize<B: Backend<M = M>>(&self, b: &mut B, spec: &FilterSpec, m0: &M, sigma0: &M) -> Result<(M, M, bool)>
    where
        M: Clone,
    {
        let (z, p, consumed) = initialize(b, spec, m0, sigma0)?;
        let sigma_c = b.scale(sigma0, self.share);
        let za = b.matmul(&self.ez, &z)?;
        let pz = b.matmul3(&self.ez, &p, &self.ezt)?;
        let pb = b.matmul3(&self.eb, &sigma_c, &self.ebt)?;
        let mut pa = b.add(&pz, &pb)?;
        if consumed {
            let g = b.lift(first_measurement_gain(spec)?)?;
            let pzb = b.matmul(&g, &sigma_c)?;
            let cross = b.matmul3(&self.ez, &pzb, &self.ebt)?;
            let cross_t = b.transpose(&cross);
            let both = b.add(&cross, &cross_t)?;
            pa = b.sub(&pa, &both)?;
        }
        let pa = b.symmetrize(&pa)?;
        Ok((za, pa, consumed))
    }
}

/// Windowed run on any backend, on the augmented state when `tc` is given.
/// At the start of every `window` steps the state is re-lifted from its
/// value, cutting gradient flow to earlier steps (a no-op on [`Plain`]).
fn run_core<B: Backend>(
    b: &mut B,
    spec: &FilterSpec,
    tc: Option<&TimeCorrelation>,
    ms: &[B::M],
    sigmas: &[B::M],
    window: Option<usize>,
    mut on_step: impl FnMut(&B, usize, &Step<B::M>),
) -> Result<Vec<(B::M, B::M)>> {
    let (sys, aug) = match tc {
        None => (lift_system(b, &spec.f, &spec.h)?, None),
        Some(tc) => {
            let (f, h) = augmented_system(spec, tc);
            (lift_system(b, &f, &h)?, Some(lift_augmentation(b, spec, tc)?))
        }
    };
    let q = b.lift(spec.q.clone())?;
    let init = match &aug {
        None => initialize(b, spec, &ms[0], &sigmas[0]),
        Some(a) => a.initialize(b, spec, &ms[0], &sigmas[0]),
    };
    let (mut z, mut p, consumed) = init.map_err(|e| e.at_step(0))?;
    let mut out = Vec::with_capacity(ms.len());
    let start = if consumed {
        out.push((z.clone(), p.clone()));
        1
    } else {
        0
    };
    for t in start..ms.len() {
        if let Some(w) = window {
            if t > start && (t - start) % w == 0 {
                z = b.lift(b.val(&z).clone())?;
                p = b.lift(b.val(&p).clone())?;
            }
        }
        let st = match &aug {
            None => step_core(b, &sys, &q, &z, &p, &ms[t], &sigmas[t], spec.joseph),
            Some(a) => a
                .noise(b, &sigmas[t])
                .and_then(|(q_t, sigma_u)| step_core(b, &sys, &q_t, &z, &p, &ms[t], &sigma_u, spec.joseph)),
        }
        .map_err(|e| e.at_step(t))?;
        on_step(b, t, &st);
        z = st.z.clone();
        p = st.p.clone();
        out.push((z.clone(), p.clone()));
    }
    Ok(out)
}

fn to_vec(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Single fused step on plain values.
pub fn step(spec: &FilterSpec, state: &FilterState, measurement: &[f64], sigma: &Matrix) -> Result<StepTrace> {
    let mut b = Plain;
    let sys = lift_system(&mut b, &spec.f, &spec.h)?;
    let st = step_core(
        &mut b,
        &sys,
        &spec.q,
        &linalg::column(&state.z),
        &state.p,
        &linalg::column(measurement),
        sigma,
        spec.joseph,
    )
    .map_err(|e| e.at_step(state.t))?;
    Ok(StepTrace {
        innovation: to_vec(&st.innovation),
        s: st.s,
        gain: st.gain,
        posterior: FilterState { z: to_vec(&st.z), p: st.p, t: state.t + 1 },
    })
}

/// Plain run over `(measurement, Σ)` pairs; `measurements[t]` has length k.
pub fn run_filter(spec: &FilterSpec, measurements: &[Vec<f64>], sigmas: &[Matrix]) -> Result<FilterRun> {
    let ms: Vec<Matrix> = measurements.iter().map(|m| linalg::column(m)).collect();
    check_inputs(spec, &ms, sigmas)?;
    let mut traces = Vec::new();
    let out = run_core(&mut Plain, spec, None, &ms, sigmas, None, |_, t, st| {
        traces.push(StepTrace {
            innovation: to_vec(&st.innovation),
            s: st.s.clone(),
            gain: st.gain.clone(),
            posterior: FilterState { z: to_vec(&st.z), p: st.p.clone(), t: t + 1 },
        })
    })?;
    let states = out
        .into_iter()
        .enumerate()
        .map(|(i, (z, p))| FilterState { z: to_vec(&z), p, t: i + 1 })
        .collect();
    Ok(FilterRun { states, traces })
}

/// Taped run. `measurements[t]` are `k × 1` nodes and `sigmas[t]` `k × k`
/// nodes on `tape`; returns the posterior mean node (`n × 1`) per
/// measurement. With `window = Some(w)`, gradients reach back at most `w`
/// steps.
pub fn run_filter_diff(
    tape: &mut Tape,
    spec: &FilterSpec,
    measurements: &[Var],
    sigmas: &[Var],
    window: Option<usize>,
) -> Result<Vec<Var>> {
    let ms: Vec<Matrix> = measurements.iter().map(|v| tape.value(*v).clone()).collect();
    let ss: Vec<Matrix> = sigmas.iter().map(|v| tape.value(*v).clone()).collect();
    check_inputs(spec, &ms, &ss)?;
    if window == Some(0) {
        return Err(Error::invalid("truncation window must be positive"));
    }
    let out = run_core(tape, spec, None, measurements, sigmas, window, |_, _, _| {})?;
    Ok(out.into_iter().map(|(z, _)| z).collect())
}

/// AR(1) measurement-bias model for the time-correlated filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCorrelation {
    /// Per-dimension AR(1) coefficient, `|φᵢ| < 1`.
    pub phi: Vec<f64>,
    /// Fraction of each `Σ_t` attributed to the correlated bias, in `[0, 1)`.
    pub share: f64,
}

impl TimeCorrelation {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.phi.len() != k {
            return Err(Error::invalid(format!("expected {k} AR(1) coefficients, got {}", self.phi.len())));
        }
        if let Some(p) = self.phi.iter().find(|p| !(p.abs() < 1.0)) {
            return Err(Error::invalid(format!("AR(1) coefficient {p} is not inside (-1, 1)")));
        }
        if !(0.0..1.0).contains(&self.share) {
            return Err(Error::invalid(format!("correlated share {} is not in [0, 1)", self.share)));
        }
        Ok(())
    }

    /// Split `Σ` into its uncorrelated part and the driving noise of the
    /// bias: `Σ_u = (1 − γ)Σ`, `Q_b = D γΣ D` with `D = diag(√(1 − φᵢ²))`.
    pub fn split(&self, sigma: &Matrix) -> (Matrix, Matrix) {
        let d = self.drive();
        (sigma * (1.0 - self.share), &d * (sigma * self.share) * &d)
    }

    fn drive(&self) -> Matrix {
        let v: Vec<f64> = self.phi.iter().map(|p| (1.0 - p * p).sqrt()).collect();
        linalg::diag_from_row(&linalg::row(&v))
    }

    /// Estimate φ and the correlated share from residual sequences by the
    /// method of moments: for `e = b + u`, lag-1 and lag-2 autocorrelations
    /// are `γφ` and `γφ²`. φ is clamped to `[0, 0.99]`, γ to `[0, 0.95]`.
    pub fn estimate(residuals: &[Vec<Vec<f64>>], k: usize) -> Result<Self> {
        let mut phi = Vec::with_capacity(k);
        let mut shares = Vec::with_capacity(k);
        for d in 0..k {
            let (mut c0, mut c1, mut c2) = (0.0, 0.0, 0.0);
            for track in residuals {
                let x: Vec<f64> = track.iter().map(|r| r[d]).collect();
                c0 += x.iter().map(|v| v * v).sum::<f64>();
                c1 += x.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
                c2 += x.windows(3).map(|w| w[0] * w[2]).sum::<f64>();
            }
            if !(c0 > 0.0) {
                return Err(Error::invalid("residuals have zero variance"));
            }
            let n0: usize = residuals.iter().map(|t| t.len()).sum();
            let n1: usize = residuals.iter().map(|t| t.len().saturating_sub(1)).sum();
            let n2: usize = residuals.iter().map(|t| t.len().saturating_sub(2)).sum();
            if n2 == 0 {
                return Err(Error::invalid("residual sequences shorter than 3 steps"));
            }
            let var = c0 / n0 as f64;
            let r1 = (c1 / n1 as f64) / var;
            let r2 = (c2 / n2 as f64) / var;
            let (p, g) = if r1 > 1e-6 && r2 > 1e-6 {
                let p = (r2 / r1).clamp(0.0, 0.99);
                (p, (r1 / p.max(1e-6)).clamp(0.0, 0.95))
            } else {
                (r1.clamp(0.0, 0.99), if r1 > 0.0 { 0.95 } else { 0.0 })
            };
            phi.push(p);
            shares.push(g);
        }
        let share = shares.iter().sum::<f64>() / k as f64;
        Ok(Self { phi, share })
    }
}

fn augmented_system(spec: &FilterSpec, tc: &TimeCorrelation) -> (Matrix, Matrix) {
    let k = spec.meas_dim();
    let phi = linalg::diag_from_row(&linalg::row(&tc.phi));
    let f = linalg::block_diag(&spec.f, &phi);
    let mut h = Matrix::zeros(k, spec.state_dim() + k);
    h.view_mut((0, 0), shape(&spec.h)).copy_from(&spec.h);
    h.view_mut((0, spec.state_dim()), (k, k)).copy_from(&Matrix::identity(k, k));
    (f, h)
}

/// Time-correlated step on an augmented state `[z; b]` (length `n + k`).
pub fn step_time_correlated(
    spec: &FilterSpec,
    tc: &TimeCorrelation,
    state: &FilterState,
    measurement: &[f64],
    sigma: &Matrix,
) -> Result<StepTrace> {
    tc.validate(spec.meas_dim())?;
    let (f, h) = augmented_system(spec, tc);
    let (sigma_u, q_b) = tc.split(sigma);
    let q = linalg::block_diag(&spec.q, &q_b);
    let mut b = Plain;
    let sys = lift_system(&mut b, &f, &h)?;
    let st = step_core(
        &mut b,
        &sys,
        &q,
        &linalg::column(&state.z),
        &state.p,
        &linalg::column(measurement),
        &sigma_u,
        spec.joseph,
    )
    .map_err(|e| e.at_step(state.t))?;
    Ok(StepTrace {
        innovation: to_vec(&st.innovation),
        s: st.s,
        gain: st.gain,
        posterior: FilterState { z: to_vec(&st.z), p: st.p, t: state.t + 1 },
    })
}

/// Plain time-correlated run. States are augmented (`n + k`); the first `n`
/// entries are the physical state.
pub fn run_filter_time_correlated(
    spec: &FilterSpec,
    tc: &TimeCorrelation,
    measurements: &[Vec<f64>],
    sigmas: &[Matrix],
) -> Result<FilterRun> {
    let ms: Vec<Matrix> = measurements.iter().map(|m| linalg::column(m)).collect();
    check_inputs(spec, &ms, sigmas)?;
    tc.validate(spec.meas_dim())?;
    let mut traces = Vec::new();
    let out = run_core(&mut Plain, spec, Some(tc), &ms, sigmas, None, |_, t, st| {
        traces.push(StepTrace {
            innovation: to_vec(&st.innovation),
            s: st.s.clone(),
            gain: st.gain.clone(),
            posterior: FilterState { z: to_vec(&st.z), p: st.p.clone(), t: t + 1 },
        })
    })?;
    let states = out
        .into_iter()
        .enumerate()
        .map(|(i, (z, p))| FilterState { z: to_vec(&z), p, t: i + 1 })
        .collect();
    Ok(FilterRun { states, traces })
}

/// Taped time-correlated run; returns the physical part (`n × 1`) of each
/// posterior mean, as [`run_filter_diff`] does.
pub fn run_filter_time_correlated_diff(
    tape: &mut Tape,
    spec: &FilterSpec,
    tc: &TimeCorrelation,
    measurements: &[Var],
    sigmas: &[Var],
    window: Option<usize>,
) -> Result<Vec<Var>> {
    let ms: Vec<Matrix> = measurements.iter().map(|v| tape.value(*v).clone()).collect();
    let ss: Vec<Matrix> = sigmas.iter().map(|v| tape.value(*v).clone()).collect();
    check_inputs(spec, &ms, &ss)?;
    tc.validate(spec.meas_dim())?;
    if window == Some(0) {
        return Err(Error::invalid("truncation window must be positive"));
    }
    let n = spec.state_dim();
    let out = run_core(tape, spec, Some(tc), measurements, sigmas, window, |_, _, _| {})?;
    out.into_iter().map(|(z, _)| tape.slice(z, 0, 0, n, 1)).collect()
}

/// Write a run as CSV: `t`, measurement, Σ upper triangle, ẑ, diag(P).
pub fn write_trace_csv(
    path: impl AsRef<Path>,
    measurements: &[Vec<f64>],
    sigmas: &[Matrix],
    run: &FilterRun,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(&mut w, measurements, sigmas, run)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace(w: &mut impl Write, measurements: &[Vec<f64>], sigmas: &[Matrix], run: &FilterRun) -> Result<()> {
    let k = measurements.first().map(Vec::len).unwrap_or(0);
    let n = run.states.first().map(|s| s.z.len()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend((0..k).map(|i| format!("m{i}")));
    header.extend((0..k).flat_map(|i| (i..k).map(move |j| format!("sigma{i}{j}"))));
    header.extend((0..n).map(|i| format!("z{i}")));
    header.extend((0..n).map(|i| format!("p{i}{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (t, ((m, s), st)) in measurements.iter().zip(sigmas).zip(&run.states).enumerate() {
        let mut fields = vec![(t + 1).to_string()];
        fields.extend(m.iter().map(|v| v.to_string()));
        fields.extend(linalg::upper_triangle(s).iter().map(|v| v.to_string()));
        fields.extend(st.z.iter().map(|v| v.to_string()));
        fields.extend(st.p.diagonal().iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
