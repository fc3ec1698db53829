//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records nodes eagerly: every operation computes its value at
//! call time and appends a node whose parents already live on the tape, so
//! the node list is always in topological order. [`Tape::backward`] walks it
//! once in reverse.
//!
//! Nodes created by [`Tape::param`] receive adjoints. Constants, and any
//! node that depends only on constants, are skipped during the reverse
//! sweep.

use crate::error::{Error, Result};
use crate::linalg::{self, shape, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Param,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    Sum(usize),
    Exp(usize),
    Tanh(usize),
    Ln(usize),
    Symmetrize(usize),
    Cholesky(usize),
    LogDetSpd { a: usize, chol: Matrix },
    SolveSpd { a: usize, b: usize, chol: Matrix },
    Slice { a: usize, r0: usize, c0: usize },
    HStack(usize, usize),
    VStack(usize, usize),
    Diag(usize),
    SymOffdiag { a: usize, k: usize },
    AddN(Vec<usize>),
}

impl Op {
    pub fn parents(&self) -> Vec<usize> {
        match self {
            Op::Param | Op::Const => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MatMul(a, b)
            | Op::Hadamard(a, b)
            | Op::HStack(a, b)
            | Op::VStack(a, b)
            | Op::SolveSpd { a, b, .. } => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Ln(a)
            | Op::Symmetrize(a)
            | Op::Cholesky(a)
            | Op::LogDetSpd { a, .. }
            | Op::Slice { a, .. }
            | Op::Diag(a)
            | Op::SymOffdiag { a, .. } => vec![*a],
            Op::AddN(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub visits: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Matrix>,
    backward_done: bool,
}

/// Forward kernels. The plain backend calls the same functions so both
/// paths round identically.
pub(crate) mod kernels {
    use super::*;

    fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
        if shape(a) != shape(b) {
            return Err(Error::ShapeMismatch { op, lhs: shape(a), rhs: shape(b) });
        }
        Ok(())
    }

    pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        same_shape("add", a, b)?;
        Ok(a + b)
    }

    pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        same_shape("sub", a, b)?;
        Ok(a - b)
    }

    pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.ncols() != b.nrows() {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: shape(a), rhs: shape(b) });
        }
        Ok(a * b)
    }

    pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        same_shape("hadamard", a, b)?;
        Ok(a.component_mul(b))
    }

    pub fn scale(a: &Matrix, c: f64) -> Matrix {
        a * c
    }

    pub fn sum(a: &Matrix) -> Matrix {
        Matrix::from_element(1, 1, a.sum())
    }

    pub fn exp(a: &Matrix) -> Matrix {
        a.map(f64::exp)
    }

    pub fn tanh(a: &Matrix) -> Matrix {
        a.map(f64::tanh)
    }

    pub fn ln(a: &Matrix) -> Result<Matrix> {
        if a.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("ln of non-positive value"));
        }
        Ok(a.map(f64::ln))
    }

    pub fn slice(a: &Matrix, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Matrix> {
        if r0 + rows > a.nrows() || c0 + cols > a.ncols() {
            return Err(Error::ShapeMismatch { op: "slice", lhs: shape(a), rhs: (r0 + rows, c0 + cols) });
        }
        Ok(a.view((r0, c0), (rows, cols)).into_owned())
    }

    pub fn hstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.nrows() != b.nrows() {
            return Err(Error::ShapeMismatch { op: "hstack", lhs: shape(a), rhs: shape(b) });
        }
        let mut out = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
        out.view_mut((0, 0), shape(a)).copy_from(a);
        out.view_mut((0, a.ncols()), shape(b)).copy_from(b);
        Ok(out)
    }

    pub fn vstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.ncols() != b.ncols() {
            return Err(Error::ShapeMismatch { op: "vstack", lhs: shape(a), rhs: shape(b) });
        }
        let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
        out.view_mut((0, 0), shape(a)).copy_from(a);
        out.view_mut((a.nrows(), 0), shape(b)).copy_from(b);
        Ok(out)
    }

    pub fn is_vector(a: &Matrix) -> bool {
        a.nrows() == 1 || a.ncols() == 1
    }

    pub fn diag(a: &Matrix) -> Result<Matrix> {
        if !is_vector(a) {
            return Err(Error::ShapeMismatch { op: "diag", lhs: shape(a), rhs: (1, a.len()) });
        }
        Ok(linalg::diag_from_row(a))
    }

    pub fn sym_offdiag(a: &Matrix, k: usize) -> Result<Matrix> {
        if !is_vector(a) || a.len() != linalg::offdiag_len(k) {
            return Err(Error::ShapeMismatch { op: "sym_offdiag", lhs: shape(a), rhs: (1, linalg::offdiag_len(k)) });
        }
        Ok(linalg::sym_from_offdiag(a, k))
    }

    pub fn add_n(xs: &[&Matrix]) -> Result<Matrix> {
        let first = xs.first().ok_or_else(|| Error::invalid("add_n of empty list"))?;
        let mut acc = (*first).clone();
        for x in &xs[1..] {
            same_shape("add_n", &acc, x)?;
            acc += *x;
        }
        Ok(acc)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// Adjoint of `v` after [`Tape::backward`]; zeros for nodes that did not
    /// need a gradient.
    pub fn grad(&self, v: Var) -> Matrix {
        match self.adjoints.get(v.0) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = shape(&self.nodes[v.0].value);
                Matrix::zeros(r, c)
            }
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let needs_grad = match &op {
            Op::Param => true,
            Op::Const => false,
            other => other.parents().iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Matrix, op: Op, what: &str) -> Result<Var> {
        if !linalg::all_finite(&value) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(self.push(op, value))
    }

    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, Op::Param, "param")
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, Op::Const, "constant")
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<Var> {
        self.constant(Matrix::from_element(1, 1, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = kernels::scale(self.value(a), c);
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(Op::Hadamard(a.0, b.0), v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = kernels::sum(self.value(a));
        self.push(Op::Sum(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = kernels::exp(self.value(a));
        self.push(Op::Exp(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = kernels::tanh(self.value(a));
        self.push(Op::Tanh(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = kernels::ln(self.value(a))?;
        Ok(self.push(Op::Ln(a.0), v))
    }

    pub fn symmetrize(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.nrows() != m.ncols() {
            return Err(Error::ShapeMismatch { op: "symmetrize", lhs: shape(m), rhs: shape(m) });
        }
        let v = linalg::symmetrize(m);
        Ok(self.push(Op::Symmetrize(a.0), v))
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = linalg::cholesky(self.value(a))?;
        Ok(self.push(Op::Cholesky(a.0), l))
    }

    /// `ln|A|` for SPD `A` (1×1 node).
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var> {
        let (ld, chol) = linalg::logdet_spd(self.value(a))?;
        Ok(self.push(Op::LogDetSpd { a: a.0, chol }, Matrix::from_element(1, 1, ld)))
    }

    /// `A⁻¹ B` for SPD `A`, through a Cholesky factor.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, chol) = linalg::solve_spd(self.value(a), self.value(b))?;
        Ok(self.push(Op::SolveSpd { a: a.0, b: b.0, chol }, x))
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        let v = kernels::slice(self.value(a), r0, c0, rows, cols)?;
        Ok(self.push(Op::Slice { a: a.0, r0, c0 }, v))
    }

    pub fn hstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::hstack(self.value(a), self.value(b))?;
        Ok(self.push(Op::HStack(a.0, b.0), v))
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::vstack(self.value(a), self.value(b))?;
        Ok(self.push(Op::VStack(a.0, b.0), v))
    }

    /// Square diagonal matrix from a row or column vector.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = kernels::diag(self.value(a))?;
        Ok(self.push(Op::Diag(a.0), v))
    }

    /// Symmetric zero-diagonal `k × k` matrix from its row-major upper
    /// triangle.
    pub fn sym_offdiag(&mut self, a: Var, k: usize) -> Result<Var> {
        let v = kernels::sym_offdiag(self.value(a), k)?;
        Ok(self.push(Op::SymOffdiag { a: a.0, k }, v))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = xs.iter().map(|v| self.value(*v)).collect();
        let v = kernels::add_n(&vals)?;
        Ok(self.push(Op::AddN(xs.iter().map(|v| v.0).collect()), v))
    }

    /// Clear adjoints so that [`Tape::backward`] may run again.
    pub fn reset_adjoints(&mut self) {
        self.adjoints.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar root. Running it twice without
    /// [`Tape::reset_adjoints`] in between is an error rather than a silent
    /// accumulation.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root_shape = shape(self.value(root));
        if root_shape != (1, 1) {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.adjoints = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.nrows(), n.value.ncols()))
            .collect();
        self.adjoints[root.0][(0, 0)] = 1.0;
        let mut visits = 0;
        for i in (0..self.nodes.len()).rev() {
            visits += 1;
            if !self.nodes[i].needs_grad || i > root.0 {
                continue;
            }
            let g = std::mem::replace(&mut self.adjoints[i], Matrix::zeros(0, 0));
            self.propagate(i, &g);
            self.adjoints[i] = g;
        }
        self.backward_done = true;
        Ok(BackwardStats { visits })
    }

    fn accumulate(&mut self, p: usize, delta: Matrix) {
        if self.nodes[p].needs_grad {
            self.adjoints[p] += delta;
        }
    }

    fn propagate(&mut self, i: usize, g: &Matrix) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Param | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, -g);
            }
            Op::MatMul(a, b) => {
                let da = g * self.nodes[b].value.transpose();
                let db = self.nodes[a].value.transpose() * g;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::Scale(a, c) => self.accumulate(a, g * c),
            Op::Hadamard(a, b) => {
                let da = g.component_mul(&self.nodes[b].value);
                let db = g.component_mul(&self.nodes[a].value);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Sum(a) => {
                let (r, c) = shape(&self.nodes[a].value);
                self.accumulate(a, Matrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Exp(a) => {
                let d = g.component_mul(&self.nodes[i].value);
                self.accumulate(a, d);
            }
            Op::Tanh(a) => {
                let d = g.component_mul(&self.nodes[i].value.map(|t| 1.0 - t * t));
                self.accumulate(a, d);
            }
            Op::Ln(a) => {
                let d = g.component_div(&self.nodes[a].value);
                self.accumulate(a, d);
            }
            Op::Symmetrize(a) => self.accumulate(a, linalg::symmetrize(g)),
            Op::Cholesky(a) => {
                let d = cholesky_adjoint(&self.nodes[i].value, g);
                self.accumulate(a, d);
            }
            Op::LogDetSpd { a, chol } => {
                let d = linalg::inverse_from_cholesky(&chol) * g[(0, 0)];
                self.accumulate(a, d);
            }
            Op::SolveSpd { a, b, chol } => {
                let db = linalg::cho_solve(&chol, g);
                let da = -linalg::symmetrize(&(&db * self.nodes[i].value.transpose()));
                self.accumulate(b, db);
                self.accumulate(a, da);
            }
            Op::Slice { a, r0, c0 } => {
                let (r, c) = shape(&self.nodes[a].value);
                let mut d = Matrix::zeros(r, c);
                d.view_mut((r0, c0), shape(g)).copy_from(g);
                self.accumulate(a, d);
            }
            Op::HStack(a, b) => {
                let ca = self.nodes[a].value.ncols();
                let cb = self.nodes[b].value.ncols();
                self.accumulate(a, g.columns(0, ca).into_owned());
                self.accumulate(b, g.columns(ca, cb).into_owned());
            }
            Op::VStack(a, b) => {
                let ra = self.nodes[a].value.nrows();
                let rb = self.nodes[b].value.nrows();
                self.accumulate(a, g.rows(0, ra).into_owned());
                self.accumulate(b, g.rows(ra, rb).into_owned());
            }
            Op::Diag(a) => {
                let (r, c) = shape(&self.nodes[a].value);
                let mut d = Matrix::zeros(r, c);
                for k in 0..d.len() {
                    d[k] = g[(k, k)];
                }
                self.accumulate(a, d);
            }
            Op::SymOffdiag { a, k } => {
                let (r, c) = shape(&self.nodes[a].value);
                let mut d = Matrix::zeros(r, c);
                for (p, (ii, jj)) in linalg::offdiag_pairs(k).enumerate() {
                    d[p] = g[(ii, jj)] + g[(jj, ii)];
                }
                self.accumulate(a, d);
            }
            Op::AddN(xs) => {
                for p in xs {
                    self.accumulate(p, g.clone());
                }
            }
        }
    }
}

/// Adjoint of `A` given the adjoint of its Cholesky factor:
/// `sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` where `Φ` keeps the lower triangle and halves the
/// diagonal. The symmetric part is taken because the input is symmetrized
/// before factorization.
fn cholesky_adjoint(l: &Matrix, lbar: &Matrix) -> Matrix {
    let lbar = lbar.lower_triangle();
    let mut p = (l.transpose() * lbar).lower_triangle();
    for k in 0..p.nrows() {
        p[(k, k)] *= 0.5;
    }
    let x = linalg::solve_lower_transpose(l, &p);
    let s = linalg::solve_lower_transpose(l, &x.transpose()).transpose();
    linalg::symmetrize(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn leaf_initialization() {
        let mut t = Tape::new();
        let p = t.param(s(2.0)).unwrap();
        assert_eq!(t.scalar(p), 2.0);
        assert_eq!(t.grad(p), s(0.0));
        let i3 = t.constant(Matrix::identity(3, 3)).unwrap();
        assert_eq!(t.value(i3), &Matrix::identity(3, 3));
        assert!(t.param(s(f64::NAN)).is_err());
        assert!(t.constant(s(f64::INFINITY)).is_err());
    }

    #[test]
    fn adjoint_shape_matches_param() {
        let mut t = Tape::new();
        let p = t.param(Matrix::zeros(2, 3)).unwrap();
        let e = t.exp(p);
        let root = t.sum(e);
        t.backward(root).unwrap();
        assert_eq!(shape(&t.grad(p)), (2, 3));
        assert!(t.grad(p).iter().all(|g| *g == 1.0));
    }

    #[test]
    fn exp_and_tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.param(s(0.0)).unwrap();
        let e = t.exp(x);
        assert_eq!(t.scalar(e), 1.0);
        t.backward(e).unwrap();
        assert_eq!(t.grad(x)[(0, 0)], 1.0);

        let mut t = Tape::new();
        let x = t.param(s(0.0)).unwrap();
        let th = t.tanh(x);
        assert_eq!(t.scalar(th), 0.0);
        t.backward(th).unwrap();
        assert_eq!(t.grad(x)[(0, 0)], 1.0);
    }

    #[test]
    fn square_and_log_exp_identity() {
        let mut t = Tape::new();
        let x = t.param(s(3.0)).unwrap();
        let y = t.hadamard(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[(0, 0)], 6.0);

        for x0 in [-2.0, 0.3, 5.0] {
            let mut t = Tape::new();
            let x = t.param(s(x0)).unwrap();
            let e = t.exp(x);
            let y = t.ln(e).unwrap();
            t.backward(y).unwrap();
            assert!((t.grad(x)[(0, 0)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_at_call_time() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3)).unwrap();
        let b = t.param(Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(t.matmul(b, a).is_ok());
    }

    #[test]
    fn backward_rules_for_root_and_repeat() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(t.backward(a), Err(Error::NonScalarRoot((2, 2)))));
        let r = t.sum(a);
        t.backward(r).unwrap();
        assert!(matches!(t.backward(r), Err(Error::BackwardTwice)));
        t.reset_adjoints();
        assert!(t.backward(r).is_ok());
    }

    #[test]
    fn visits_every_node_once() {
        let mut t = Tape::new();
        let x = t.param(s(1.5)).unwrap();
        let c = t.constant(s(2.0)).unwrap();
        let y = t.matmul(x, c).unwrap();
        let z = t.exp(y);
        let w = t.add(z, x).unwrap();
        let stats = t.backward(w).unwrap();
        assert_eq!(stats.visits, t.len());
    }

    #[test]
    fn cholesky_logdet_solve_values() {
        let mut t = Tape::new();
        let a = t.param(Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        let l = t.cholesky(a).unwrap();
        assert_eq!(t.value(l), &Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));

        let mut t = Tape::new();
        let a = t.param(Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0])).unwrap();
        let ld = t.logdet_spd(a).unwrap();
        assert!((t.scalar(ld) - 4f64.ln()).abs() < 1e-15);
        t.backward(ld).unwrap();
        assert!((t.grad(a)[(0, 0)] - 0.5).abs() < 1e-15);

        let mut t = Tape::new();
        let i = t.constant(Matrix::identity(3, 3)).unwrap();
        let b = t.param(linalg::column(&[1.0, -2.0, 0.5])).unwrap();
        let x = t.solve_spd(i, b).unwrap();
        assert_eq!(t.value(x), t.value(b));
    }

    #[test]
    fn non_pd_input_is_reported() {
        let mut t = Tape::new();
        let a = t.param(Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(matches!(t.cholesky(a), Err(Error::NotPositiveDefinite { .. })));
        assert!(matches!(t.logdet_spd(a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(s(2.0)).unwrap();
        let x = t.param(s(3.0)).unwrap();
        let y = t.hadamard(c, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(c)[(0, 0)], 0.0);
        assert_eq!(t.grad(x)[(0, 0)], 2.0);
    }
}
