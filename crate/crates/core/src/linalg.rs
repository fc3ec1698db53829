//! Dense kernels shared by the plain and taped code paths.
//!
//! Both paths call these functions, so a computation expressed once against
//! [`crate::backend::Backend`] produces bit-identical values whichever path
//! runs it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative asymmetry tolerated before an SPD routine refuses its input.
pub const SYMMETRY_TOL: f64 = 1e-6;

/// Multipliers of `trace(A)/k` tried, in order, by [`jitter_ladder`]. A
/// final rung of `k` (a load of the full trace) follows; it always succeeds
/// when every `|a_ij| < √(a_ii a_jj)`, since then `‖A‖_F < trace(A)`.
pub const JITTER_LADDER: [f64; 7] = [0.0, 1e-9, 1e-6, 1e-3, 1e-2, 1e-1, 1.0];

pub fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

pub fn row(values: &[f64]) -> Matrix {
    Matrix::from_row_slice(1, values.len(), values)
}

pub fn column(values: &[f64]) -> Matrix {
    Matrix::from_column_slice(values.len(), 1, values)
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// `‖A − Aᵀ‖_F / ‖A‖_F`, zero for the zero matrix.
pub fn asymmetry(a: &Matrix) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

fn require_square(op: &'static str, a: &Matrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch { op, lhs: shape(a), rhs: shape(a) });
    }
    Ok(())
}

/// Symmetrize `a` after checking it is close enough to symmetric to be an
/// honest SPD input.
pub fn checked_symmetric(a: &Matrix) -> Result<Matrix> {
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(symmetrize(a))
}

/// Lower Cholesky factor of an already-symmetric matrix.
pub fn cholesky_raw(a: &Matrix) -> Result<Matrix> {
    require_square("cholesky", a)?;
    let n = a.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { step: None });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Symmetrize-then-factor, rejecting visibly asymmetric input.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    require_square("cholesky", a)?;
    cholesky_raw(&checked_symmetric(a)?)
}

/// Solve `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `(L Lᵀ) X = B`.
pub fn cho_solve(l: &Matrix, b: &Matrix) -> Matrix {
    solve_lower_transpose(l, &solve_lower(l, b))
}

pub fn logdet_from_cholesky(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `A⁻¹ B` for SPD `A`, returning the factor alongside the solution.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    require_square("solve_spd", a)?;
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch { op: "solve_spd", lhs: shape(a), rhs: shape(b) });
    }
    let l = cholesky(a)?;
    let x = cho_solve(&l, b);
    Ok((x, l))
}

pub fn logdet_spd(a: &Matrix) -> Result<(f64, Matrix)> {
    let l = cholesky(a)?;
    Ok((logdet_from_cholesky(&l), l))
}

pub fn inverse_from_cholesky(l: &Matrix) -> Matrix {
    let n = l.nrows();
    symmetrize(&cho_solve(l, &Matrix::identity(n, n)))
}

/// First diagonal load `λ = c·trace(A)/k`, `c` from [`JITTER_LADDER`], for
/// which `A + λI` factors.
pub fn jitter_ladder(a: &Matrix) -> Result<f64> {
    require_square("jitter_ladder", a)?;
    let a = checked_symmetric(a)?;
    let k = a.nrows() as f64;
    // A zero matrix has no scale of its own; load it in absolute units.
    let base = if a.trace() > 0.0 { a.trace() / k } else { 1.0 };
    for c in JITTER_LADDER.into_iter().chain([k]) {
        let lambda = c * base;
        let mut trial = a.clone();
        for i in 0..a.nrows() {
            trial[(i, i)] += lambda;
        }
        if cholesky_raw(&trial).is_ok() {
            return Ok(lambda);
        }
    }
    Err(Error::NotPositiveDefinite { step: None })
}

/// Apply the jitter ladder and return the loaded matrix with the load used.
pub fn stabilize(a: &Matrix) -> Result<(Matrix, f64)> {
    let lambda = jitter_ladder(a)?;
    let mut out = a.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += lambda;
    }
    Ok((out, lambda))
}

/// Number of strictly-upper-triangular entries of a `k × k` matrix.
pub fn offdiag_len(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Row-major strictly-upper-triangular index pairs `(i, j)`, `i < j`.
pub fn offdiag_pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |i| ((i + 1)..k).map(move |j| (i, j)))
}

/// Build the symmetric zero-diagonal matrix whose upper triangle, read
/// row-major, is `r` (a `1 × k(k−1)/2` row).
pub fn sym_from_offdiag(r: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(k, k);
    for (p, (i, j)) in offdiag_pairs(k).enumerate() {
        out[(i, j)] = r[p];
        out[(j, i)] = r[p];
    }
    out
}

/// Upper triangle (diagonal included) read row-major.
pub fn upper_triangle(a: &Matrix) -> Vec<f64> {
    let k = a.nrows();
    (0..k).flat_map(|i| (i..k).map(move |j| a[(i, j)])).collect()
}

pub fn from_upper_triangle(values: &[f64], k: usize) -> Matrix {
    let mut out = Matrix::zeros(k, k);
    let mut p = 0;
    for i in 0..k {
        for j in i..k {
            out[(i, j)] = values[p];
            out[(j, i)] = values[p];
            p += 1;
        }
    }
    out
}

pub fn diag_from_row(v: &Matrix) -> Matrix {
    let n = v.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = v[i];
    }
    out
}

pub fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca) = shape(a);
    let (rb, cb) = shape(b);
    let mut out = Matrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

/// Moore–Penrose pseudo-inverse.
pub fn pseudo_inverse(a: &Matrix) -> Result<Matrix> {
    a.clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Matrix {
        Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0])
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let l = cholesky(&a).unwrap();
        let err = (&l * l.transpose() - &a).norm() / a.norm();
        assert!(err < 1e-14);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_diagonal_cases() {
        assert_eq!(cholesky(&Matrix::identity(2, 2)).unwrap(), Matrix::identity(2, 2));
        let l = cholesky(&Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        assert_eq!(l, Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&bad), Err(Error::NotPositiveDefinite { .. })));
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(cholesky(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn solves_match_inverse() {
        let a = spd3();
        let b = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0]);
        let (x, _) = solve_spd(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() < 1e-12);
        let inv = a.clone().try_inverse().unwrap();
        let l = cholesky(&a).unwrap();
        assert!((inverse_from_cholesky(&l) - inv).norm() < 1e-12);
    }

    #[test]
    fn logdet_diag() {
        let (ld, _) = logdet_spd(&Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0])).unwrap();
        assert!((ld - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn jitter_ladder_escalates() {
        assert_eq!(jitter_ladder(&Matrix::identity(3, 3)).unwrap(), 0.0);
        assert_eq!(jitter_ladder(&Matrix::zeros(2, 2)).unwrap(), 1e-9);
        // Rank-deficient PSD: the first nonzero rung suffices.
        let v = column(&[1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let lambda = jitter_ladder(&a).unwrap();
        assert!(lambda > 0.0 && lambda <= 1e-3 * a.trace() / 3.0);
        // Pairwise-valid but jointly indefinite: a large rung is needed.
        let ind = Matrix::from_row_slice(3, 3, &[1.0, 0.99, 0.99, 0.99, 1.0, -0.99, 0.99, -0.99, 1.0]);
        let lambda = jitter_ladder(&ind).unwrap();
        assert!(lambda >= 1e-1 && cholesky(&(&ind + Matrix::identity(3, 3) * lambda)).is_ok());
        // Off-diagonal beyond the geometric mean of the diagonal: no rung works.
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(jitter_ladder(&bad).is_err());
    }

    #[test]
    fn offdiag_layout_round_trip() {
        let r = row(&[1.0, 2.0, 3.0]);
        let m = sym_from_offdiag(&r, 3);
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(0, 2)], 2.0);
        assert_eq!(m[(1, 2)], 3.0);
        assert_eq!(m[(2, 1)], 3.0);
        let full = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(from_upper_triangle(&upper_triangle(&full), 2), full);
    }
}
