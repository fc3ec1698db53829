//! One algebra, two evaluators.
//!
//! The model forward pass and the Kalman recursion are written once against
//! [`Backend`]. [`Plain`] evaluates on owned matrices; [`Tape`] records the
//! same operations for differentiation. Both call the kernels in
//! [`crate::autodiff::kernels`] and [`crate::linalg`], so their values agree
//! bit for bit.

use crate::autodiff::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, shape, Matrix};

pub trait Backend {
    type M: Clone;

    fn lift(&mut self, value: Matrix) -> Result<Self::M>;
    fn val<'a>(&'a self, m: &'a Self::M) -> &'a Matrix;

    fn add(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn sub(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn transpose(&mut self, a: &Self::M) -> Self::M;
    fn scale(&mut self, a: &Self::M, c: f64) -> Self::M;
    fn hadamard(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn exp(&mut self, a: &Self::M) -> Self::M;
    fn tanh(&mut self, a: &Self::M) -> Self::M;
    fn symmetrize(&mut self, a: &Self::M) -> Result<Self::M>;
    fn solve_spd(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn slice(&mut self, a: &Self::M, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self::M>;
    fn hstack(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn vstack(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn diag(&mut self, a: &Self::M) -> Result<Self::M>;
    fn sym_offdiag(&mut self, a: &Self::M, k: usize) -> Result<Self::M>;

    fn shape_of(&self, m: &Self::M) -> (usize, usize) {
        shape(self.val(m))
    }

    /// `a·b·c`, evaluated left to right.
    fn matmul3(&mut self, a: &Self::M, b: &Self::M, c: &Self::M) -> Result<Self::M> {
        let ab = self.matmul(a, b)?;
        self.matmul(&ab, c)
    }

    /// Add a constant matrix.
    fn add_const(&mut self, a: &Self::M, c: Matrix) -> Result<Self::M> {
        let c = self.lift(c)?;
        self.add(a, &c)
    }
}

/// Eager evaluation on owned matrices, no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Plain;

impl Backend for Plain {
    type M = Matrix;

    fn lift(&mut self, value: Matrix) -> Result<Matrix> {
        if !linalg::all_finite(&value) {
            return Err(Error::NonFinite("constant".into()));
        }
        Ok(value)
    }

    fn val<'a>(&'a self, m: &'a Matrix) -> &'a Matrix {
        m
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernels::add(a, b)
    }

    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernels::sub(a, b)
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernels::matmul(a, b)
    }

    fn transpose(&mut self, a: &Matrix) -> Matrix {
        a.transpose()
    }

    fn scale(&mut self, a: &Matrix, c: f64) -> Matrix {
        kernels::scale(a, c)
    }

    fn hadamard(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernels::hadamard(a, b)
    }

    fn exp(&mut self, a: &Matrix) -> Matrix {
        kernels::exp(a)
    }

    fn tanh(&mut self, a: &Matrix) -> Matrix {
        kernels::tanh(a)
    }

    fn symmetrize(&mut self, a: &Matrix) -> Result<Matrix> {
        if a.nrows() != a.ncols() {
            return Err(Error::ShapeMismatch { op: "symmetrize", lhs: shape(a), rhs: shape(a) });
        }
        Ok(linalg::symmetrize(a))
    }

    fn solve_spd(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        Ok(linalg::solve_spd(a, b)?.0)
    }

    fn slice(&mut self, a: &Matrix, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Matrix> {
        kernels::slice(a, r0, c0, rows, cols)
    }

    fn hstack(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernels::hstack(a, b)
    }

    fn vstack(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        kernels::vstack(a, b)
    }

    fn diag(&mut self, a: &Matrix) -> Result<Matrix> {
        kernels::diag(a)
    }

    fn sym_offdiag(&mut self, a: &Matrix, k: usize) -> Result<Matrix> {
        kernels::sym_offdiag(a, k)
    }
}

impl Backend for Tape {
    type M = Var;

    fn lift(&mut self, value: Matrix) -> Result<Var> {
        self.constant(value)
    }

    fn val<'a>(&'a self, m: &'a Var) -> &'a Matrix {
        self.value(*m)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }

    fn transpose(&mut self, a: &Var) -> Var {
        Tape::transpose(self, *a)
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        Tape::scale(self, *a, c)
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::hadamard(self, *a, *b)
    }

    fn exp(&mut self, a: &Var) -> Var {
        Tape::exp(self, *a)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        Tape::tanh(self, *a)
    }

    fn symmetrize(&mut self, a: &Var) -> Result<Var> {
        Tape::symmetrize(self, *a)
    }

    fn solve_spd(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::solve_spd(self, *a, *b)
    }

    fn slice(&mut self, a: &Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        Tape::slice(self, *a, r0, c0, rows, cols)
    }

    fn hstack(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::hstack(self, *a, *b)
    }

    fn vstack(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::vstack(self, *a, *b)
    }

    fn diag(&mut self, a: &Var) -> Result<Var> {
        Tape::diag(self, *a)
    }

    fn sym_offdiag(&mut self, a: &Var, k: usize) -> Result<Var> {
        Tape::sym_offdiag(self, *a, k)
    }
}
