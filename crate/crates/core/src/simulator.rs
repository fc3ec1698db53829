//! Synthetic data: the 2-D heteroscedastic "rainbow" curve and 3-D
//! constant-velocity tracks whose measurement noise depends on a per-frame
//! orientation.
//!
//! Track inputs are `x = [y + β·u(q), q, d]`, where `y = Hz + e` is the
//! noisy position, `q` a unit quaternion drawn per frame, `u(q)` a fixed
//! quadratic offset the regressor must undo, and `d` a distractor. The noise
//! `e` has covariance `Σ_true = s(p_z)² · R(q) diag(a², b², c²) R(q)ᵀ`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::Rng;

pub const INPUT_DIM: usize = 13;
pub const POS_DIM: usize = 3;
pub const STATE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseField {
    /// Standard deviation along the major axis, mm.
    pub base_scale: f64,
    /// Axis lengths relative to `base_scale`.
    pub anisotropy: [f64; 3],
    /// Relative change of the noise scale across the box height.
    pub depth_gain: f64,
    /// Amplitude of the orientation-dependent input offset `β`, mm.
    pub orientation_offset: f64,
    /// AR(1) coefficient of the noise along each track; 0 gives white noise.
    pub ar1_phi: f64,
}

impl Default for NoiseField {
    fn default() -> Self {
        Self { base_scale: 20.0, anisotropy: [1.0, 0.4, 0.2], depth_gain: 0.5, orientation_offset: 20.0, ar1_phi: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Steps per track.
    pub duration: usize,
    /// Seconds between steps.
    pub dt: f64,
    /// Speed range, mm/s.
    pub speed_range: [f64; 2],
    /// Edge of the cubic start box, mm.
    pub box_size: f64,
    pub noise: NoiseField,
    /// White-acceleration process noise density, mm/s²/√Hz. Zero gives
    /// exact constant-velocity motion.
    pub accel_std: f64,
    pub seed: u64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            duration: 20,
            dt: 0.25,
            speed_range: [10.0, 200.0],
            box_size: 1000.0,
            noise: NoiseField::default(),
            accel_std: 0.0,
            seed: 0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.duration < 2 {
            return bad(format!("duration {} must be at least 2", self.duration));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt {} must be positive", self.dt));
        }
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid speed range [{lo}, {hi}]"));
        }
        if !(self.box_size > 0.0) || !self.box_size.is_finite() {
            return bad("box_size must be positive".into());
        }
        if !(self.accel_std >= 0.0) || !self.accel_std.is_finite() {
            return bad(format!("accel_std {} must be non-negative", self.accel_std));
        }
        let n = &self.noise;
        if !(n.base_scale >= 0.0) || n.anisotropy.iter().any(|a| !(*a > 0.0)) {
            return bad("noise scales must be non-negative with positive anisotropy".into());
        }
        if !(n.ar1_phi.abs() < 1.0) {
            return bad(format!("ar1_phi {} must lie in (-1, 1)", n.ar1_phi));
        }
        if !n.depth_gain.is_finite() || !n.orientation_offset.is_finite() {
            return bad("noise parameters must be finite".into());
        }
        Ok(())
    }
}

/// One frame of a track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackStep {
    pub x: Vec<f64>,
    /// Noisy position `Hz + e`, mm.
    pub y: Vec<f64>,
    /// True state `[position; velocity]`, mm and mm/s.
    pub z: Vec<f64>,
    pub sigma_true: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub steps: Vec<TrackStep>,
}

impl Track {
    pub fn inputs(&self) -> Matrix {
        stack(self.steps.iter().map(|s| s.x.as_slice()))
    }

    pub fn positions(&self) -> Matrix {
        stack(self.steps.iter().map(|s| &s.z[..POS_DIM]))
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.z.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackDataset {
    pub tracks: Vec<Track>,
}

impl TrackDataset {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.tracks.iter().map(|t| t.steps.len()).sum()
    }

    fn all_steps(&self) -> impl Iterator<Item = &TrackStep> {
        self.tracks.iter().flat_map(|t| &t.steps)
    }

    /// All frames as a regression set: inputs `x` and true positions.
    pub fn regression_pairs(&self) -> (Matrix, Matrix) {
        (stack(self.all_steps().map(|s| s.x.as_slice())), stack(self.all_steps().map(|s| &s.z[..POS_DIM])))
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Matrix {
    let rows: Vec<&[f64]> = rows.collect();
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation(q: &[f64]) -> Matrix {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix::from_row_slice(
        3,
        3,
        &[
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    )
}

/// Fixed offset in `[−1, 1]³` applied to the position encoding. It is
/// quadratic in the rotation entries, so no linear map of the orientation
/// features reproduces it.
pub fn orientation_offset(r: &Matrix) -> [f64; 3] {
    let u = |i: usize| r[(i, i)].powi(2) - r[(i, (i + 2) % 3)].powi(2);
    [u(0), u(1), u(2)]
}

impl NoiseField {
    /// Noise covariance at height `pz` (mm) for orientation `q`.
    pub fn sigma(&self, q: &[f64], pz: f64, box_size: f64) -> Matrix {
        let depth = (1.0 + self.depth_gain * (pz / box_size - 0.5)).max(0.25);
        let s = self.base_scale * depth;
        let axes: Vec<f64> = self.anisotropy.iter().map(|a| (s * a).powi(2)).collect();
        let r = rotation(q);
        let d = linalg::diag_from_row(&linalg::row(&axes));
        linalg::symmetrize(&(&r * d * r.transpose()))
    }
}

fn unit_quaternion(rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|a| a / n).collect();
        }
    }
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Lower Cholesky factor, or zeros for a zero matrix.
fn noise_factor(sigma: &Matrix) -> Matrix {
    if sigma.iter().all(|v| *v == 0.0) {
        return Matrix::zeros(sigma.nrows(), sigma.ncols());
    }
    linalg::cholesky(sigma).expect("noise covariance is positive definite by construction")
}

fn generate_track(cfg: &TrackConfig, rng: &mut Rng) -> Track {
    let n = &cfg.noise;
    let mut p: Vec<f64> = (0..POS_DIM).map(|_| rng.uniform_range(0.0, cfg.box_size)).collect();
    let dir = unit_vector(rng);
    let speed = rng.uniform_range(cfg.speed_range[0], cfg.speed_range[1]);
    let mut v: Vec<f64> = dir.iter().map(|d| d * speed).collect();
    let mut w_prev: Option<Matrix> = None;
    let drive = (1.0 - n.ar1_phi * n.ar1_phi).sqrt();
    let mut steps = Vec::with_capacity(cfg.duration);
    for t in 0..cfg.duration {
        if t > 0 {
            for i in 0..POS_DIM {
                p[i] += cfg.dt * v[i];
            }
            if cfg.accel_std > 0.0 {
                // Cholesky factor of a·[[dt³/3, dt²/2], [dt²/2, dt]] per axis.
                let (a, dt) = (cfg.accel_std, cfg.dt);
                let (l11, l21, l22) = (a * (dt.powi(3) / 3.0).sqrt(), a * (3.0 * dt).sqrt() / 2.0, a * dt.sqrt() / 2.0);
                for i in 0..POS_DIM {
                    let (g1, g2) = (rng.normal(), rng.normal());
                    p[i] += l11 * g1;
                    v[i] += l21 * g1 + l22 * g2;
                }
            }
        }
        let q = unit_quaternion(rng);
        let sigma = n.sigma(&q, p[2], cfg.box_size);
        // AR(1) on the whitened noise, so Σ_t stays the exact covariance of
        // each measurement error.
        let xi = linalg::column(&[rng.normal(), rng.normal(), rng.normal()]);
        let w = match w_prev {
            Some(prev) if n.ar1_phi != 0.0 => prev * n.ar1_phi + xi * drive,
            _ => xi,
        };
        let e = noise_factor(&sigma) * &w;
        let y: Vec<f64> = (0..POS_DIM).map(|i| p[i] + e[i]).collect();
        let r = rotation(&q);
        let u = orientation_offset(&r);
        let mut x: Vec<f64> = (0..POS_DIM).map(|i| y[i] + n.orientation_offset * u[i]).collect();
        x.extend((0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|ij| r[ij]));
        x.push(rng.uniform_range(-1.0, 1.0));
        let mut z = p.clone();
        z.extend_from_slice(&v);
        steps.push(TrackStep { x, y, z, sigma_true: sigma });
        w_prev = Some(w);
    }
    Track { steps }
}

/// `n_tracks` tracks; track `i` draws from its own stream of `cfg.seed`.
pub fn generate_tracks(cfg: &TrackConfig, n_tracks: usize) -> Result<TrackDataset> {
    cfg.validate()?;
    let tracks = (0..n_tracks)
        .into_par_iter()
        .map(|i| generate_track(cfg, &mut Rng::stream(cfg.seed, i as u64)))
        .collect();
    Ok(TrackDataset { tracks })
}

/// Per-track input perturbation: designated dims are multiplied by a factor
/// drawn from `scale_range` and shifted by a normal offset of `offset_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodShift {
    pub dims: Vec<usize>,
    pub scale_range: [f64; 2],
    pub offset_std: f64,
    pub seed: u64,
}

impl Default for OodShift {
    fn default() -> Self {
        Self { dims: (3..INPUT_DIM).collect(), scale_range: [1.5, 2.5], offset_std: 0.05, seed: 1 }
    }
}

impl OodShift {
    pub fn none() -> Self {
        Self { dims: Vec::new(), scale_range: [1.0, 1.0], offset_std: 0.0, seed: 0 }
    }

    pub fn is_identity(&self) -> bool {
        self.dims.is_empty() || (self.scale_range == [1.0, 1.0] && self.offset_std == 0.0)
    }
}

/// Apply an [`OodShift`] to the inputs; labels and states are untouched.
pub fn apply_ood_shift(data: &TrackDataset, shift: &OodShift) -> Result<TrackDataset> {
    let finite = shift.scale_range.iter().all(|v| v.is_finite()) && shift.offset_std.is_finite();
    if !finite || shift.scale_range[0] > shift.scale_range[1] || shift.offset_std < 0.0 {
        return Err(Error::invalid("OOD shift parameters must be finite with lo ≤ hi"));
    }
    if shift.is_identity() {
        return Ok(data.clone());
    }
    let mut out = data.clone();
    for (i, track) in out.tracks.iter_mut().enumerate() {
        let mut rng = Rng::stream(shift.seed, i as u64);
        let params: Vec<(usize, f64, f64)> = shift
            .dims
            .iter()
            .map(|&d| (d, rng.uniform_range(shift.scale_range[0], shift.scale_range[1]), shift.offset_std * rng.normal()))
            .collect();
        for step in &mut track.steps {
            for &(d, a, b) in &params {
                let Some(v) = step.x.get_mut(d) else {
                    return Err(Error::invalid(format!("shift dimension {d} out of range")));
                };
                *v = *v * a + b;
            }
        }
    }
    Ok(out)
}

fn columns(k: usize, prefix: &str) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

fn sigma_columns(k: usize) -> Vec<String> {
    (0..k).flat_map(|i| (i..k).map(move |j| format!("s{i}{j}"))).collect()
}

/// CSV header of a track dataset: `track,t,x0..x7,y0..y2,z0..z5,s00..s22`.
pub fn track_header() -> Vec<String> {
    let mut h = vec!["track".to_string(), "t".to_string()];
    h.extend(columns(INPUT_DIM, "x"));
    h.extend(columns(POS_DIM, "y"));
    h.extend(columns(STATE_DIM, "z"));
    h.extend(sigma_columns(POS_DIM));
    h
}

pub fn write_tracks(w: impl Write, data: &TrackDataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(track_header()).map_err(err)?;
    for (i, track) in data.tracks.iter().enumerate() {
        for (t, s) in track.steps.iter().enumerate() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(s.x.iter().chain(&s.y).chain(&s.z).map(|v| v.to_string()));
            rec.extend(linalg::upper_triangle(&s.sigma_true).iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_tracks(path: impl AsRef<Path>, data: &TrackDataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tracks(std::io::BufWriter::new(file), data)
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(r: impl Read) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd
            .headers()
            .map_err(|e| Error::Parse { line: Some(1), msg: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Parse { line: e.position().map(|p| p.line()), msg: e.to_string() })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Self { header, rows })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index(n)).collect()
    }
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<f64> {
    let field = rec.get(idx).unwrap_or("");
    field
        .parse::<f64>()
        .map_err(|_| Error::Parse { line: Some(line), msg: format!("`{field}` is not a number") })
}

fn parse_usize(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<usize> {
    let field = rec.get(idx).unwrap_or("");
    field
        .parse::<usize>()
        .map_err(|_| Error::Parse { line: Some(line), msg: format!("`{field}` is not an index") })
}

pub fn read_tracks(r: impl Read) -> Result<TrackDataset> {
    let table = Table::read(r)?;
    let track_col = table.index("track")?;
    let t_col = table.index("t")?;
    let xs = table.indices(&columns(INPUT_DIM, "x"))?;
    let ys = table.indices(&columns(POS_DIM, "y"))?;
    let zs = table.indices(&columns(STATE_DIM, "z"))?;
    let ss = table.indices(&sigma_columns(POS_DIM))?;
    let mut tracks: Vec<Track> = Vec::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let id = parse_usize(rec, track_col, line)?;
        let t = parse_usize(rec, t_col, line)?;
        let get = |cols: &[usize]| cols.iter().map(|&c| parse_f64(rec, c, line)).collect::<Result<Vec<f64>>>();
        let step = TrackStep {
            x: get(&xs)?,
            y: get(&ys)?,
            z: get(&zs)?,
            sigma_true: linalg::from_upper_triangle(&get(&ss)?, POS_DIM),
        };
        if id == tracks.len() {
            tracks.push(Track { steps: Vec::new() });
        }
        if id + 1 != tracks.len() {
            return Err(Error::Parse { line: Some(line), msg: format!("track {id} out of order") });
        }
        let track = &mut tracks[id];
        if t != track.steps.len() {
            return Err(Error::Parse { line: Some(line), msg: format!("step {t} out of order in track {id}") });
        }
        track.steps.push(step);
    }
    Ok(TrackDataset { tracks })
}

pub fn load_tracks(path: impl AsRef<Path>) -> Result<TrackDataset> {
    read_tracks(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Settings of the 2-D demo curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainbowConfig {
    pub n_points: usize,
    /// Major-axis standard deviation at the middle of the curve.
    pub scale: f64,
    /// Constant covariance when true.
    pub homoscedastic: bool,
    pub seed: u64,
}

impl Default for RainbowConfig {
    fn default() -> Self {
        Self { n_points: 2000, scale: 0.15, homoscedastic: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainbowPoint {
    pub t: f64,
    pub sample: [f64; 2],
    pub mean: [f64; 2],
    pub sigma_true: Matrix,
}

/// Arc from `(1, 0)` to `(−1, 0)`, bulging upward.
pub fn rainbow_mean(t: f64) -> [f64; 2] {
    let a = std::f64::consts::PI * t;
    [a.cos(), a.sin()]
}

/// Ellipse whose size grows along the curve and whose major axis turns
/// from radial to tangential.
pub fn rainbow_sigma(t: f64, scale: f64, homoscedastic: bool) -> Matrix {
    let (major, minor, angle) = if homoscedastic {
        (scale, 0.4 * scale, 0.6)
    } else {
        let a = std::f64::consts::PI * t;
        (scale * (0.4 + 1.2 * t), scale * (0.15 + 0.2 * (1.0 - t)), a + 0.5 * a)
    };
    let (s, c) = angle.sin_cos();
    let r = Matrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let d = linalg::diag_from_row(&linalg::row(&[major * major, minor * minor]));
    linalg::symmetrize(&(&r * d * r.transpose()))
}

pub fn generate_rainbow(cfg: &RainbowConfig) -> Result<Vec<RainbowPoint>> {
    if cfg.n_points == 0 {
        return Err(Error::invalid("n_points must be at least 1"));
    }
    if !(cfg.scale >= 0.0) || !cfg.scale.is_finite() {
        return Err(Error::invalid("rainbow scale must be non-negative"));
    }
    let mut rng = Rng::new(cfg.seed);
    Ok((0..cfg.n_points)
        .map(|_| {
            let t = rng.uniform();
            let mean = rainbow_mean(t);
            let sigma = rainbow_sigma(t, cfg.scale, cfg.homoscedastic);
            let e = noise_factor(&sigma) * linalg::column(&[rng.normal(), rng.normal()]);
            RainbowPoint { t, sample: [mean[0] + e[0], mean[1] + e[1]], mean, sigma_true: sigma }
        })
        .collect())
}

/// Inputs (`n × 1`, the curve parameter) and samples (`n × 2`).
pub fn rainbow_pairs(points: &[RainbowPoint]) -> (Matrix, Matrix) {
    let x = Matrix::from_fn(points.len(), 1, |i, _| points[i].t);
    let y = Matrix::from_fn(points.len(), 2, |i, j| points[i].sample[j]);
    (x, y)
}
