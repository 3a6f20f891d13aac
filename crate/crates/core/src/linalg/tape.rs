//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Operations are recorded eagerly on a tape; creation order is a topological
//! order, so the backward pass is a single reverse sweep that visits each node
//! exactly once and sums gradient contributions arriving over multiple paths.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Add a `1 x m` row vector to every row.
    AddRow(usize, usize),
    /// Add an `n x 1` column vector to every column.
    AddCol(usize, usize),
    /// Multiply row `i` by the `i`-th entry of an `n x 1` vector.
    ScaleRows(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Recip(usize),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    SoftmaxCols(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
}

impl Op {
    /// Node indices this op reads from.
    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Constant | Op::Param => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::ScaleRows(a, b) => [Some(a), Some(b)],
            Op::Transpose(a)
            | Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::ClampMin(a, _)
            | Op::SoftmaxRows(a)
            | Op::SoftmaxCols(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recording tape. Build a fresh one per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Matrix, op: Op) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        VarId(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient entry of its own.
    pub fn constant(&self, value: Matrix) -> VarId {
        self.push(value, Op::Constant)
    }

    /// Leaf tracked as a learnable parameter.
    pub fn param(&self, value: Matrix) -> VarId {
        self.push(value, Op::Param)
    }

    /// Current value of a node (cloned).
    pub fn value(&self, id: VarId) -> Matrix {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: VarId) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let v = &nodes[id.0].value;
        if v.rows() != 1 || v.cols() != 1 {
            return Err(Error::Contract(format!(
                "expected 1x1 node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.get(0, 0))
    }

    /// True when `root` reads `leaf` through some chain of recorded ops.
    /// Structural only: a dependency with an identically-zero gradient
    /// still counts.
    pub fn depends_on(&self, root: VarId, leaf: VarId) -> bool {
        let nodes = self.nodes.borrow();
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if i == leaf.0 {
                return true;
            }
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            for input in nodes[i].op.inputs().into_iter().flatten() {
                stack.push(input);
            }
        }
        false
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id.0].value.rows(), nodes[id.0].value.cols())
    }

    fn binary(
        &self,
        a: VarId,
        b: VarId,
        op: fn(usize, usize) -> Op,
        f: impl Fn(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<VarId> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(value, op(a.0, b.0)))
    }

    fn unary(&self, a: VarId, op: Op, f: impl Fn(&Matrix) -> Matrix) -> VarId {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        self.push(value, op)
    }

    pub fn matmul(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::MatMul, |x, y| x.matmul(y))
    }

    pub fn transpose(&self, a: VarId) -> VarId {
        self.unary(a, Op::Transpose(a.0), |x| x.transpose())
    }

    pub fn add(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Add, |x, y| x.add(y))
    }

    pub fn sub(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Sub, |x, y| x.sub(y))
    }

    /// Elementwise product.
    pub fn mul(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Mul, |x, y| x.zip_map(y, |p, q| p * q))
    }

    /// Elementwise quotient.
    pub fn div(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Div, |x, y| x.zip_map(y, |p, q| p / q))
    }

    /// Broadcast-add a `1 x m` row vector to each row of an `n x m` matrix.
    pub fn add_row(&self, x: VarId, row: VarId) -> Result<VarId> {
        self.binary(x, row, Op::AddRow, |m, r| {
            if r.rows() != 1 || r.cols() != m.cols() {
                return Err(Error::DimensionMismatch {
                    op: "add_row",
                    lhs_rows: m.rows(),
                    lhs_cols: m.cols(),
                    rhs_rows: r.rows(),
                    rhs_cols: r.cols(),
                });
            }
            let mut out = m.clone();
            for i in 0..out.rows() {
                for (o, &v) in out.row_mut(i).iter_mut().zip(r.row(0).iter()) {
                    *o += v;
                }
            }
            Ok(out)
        })
    }

    /// Broadcast-add an `n x 1` column vector to each column of an `n x m` matrix.
    pub fn add_col(&self, x: VarId, col: VarId) -> Result<VarId> {
        self.binary(x, col, Op::AddCol, |m, c| {
            if c.cols() != 1 || c.rows() != m.rows() {
                return Err(Error::DimensionMismatch {
                    op: "add_col",
                    lhs_rows: m.rows(),
                    lhs_cols: m.cols(),
                    rhs_rows: c.rows(),
                    rhs_cols: c.cols(),
                });
            }
            let mut out = m.clone();
            for i in 0..out.rows() {
                let v = c.get(i, 0);
                for o in out.row_mut(i) {
                    *o += v;
                }
            }
            Ok(out)
        })
    }

    /// Multiply row `i` by entry `i` of an `n x 1` vector.
    pub fn scale_rows(&self, x: VarId, scales: VarId) -> Result<VarId> {
        self.binary(x, scales, Op::ScaleRows, |m, s| {
            if s.cols() != 1 || s.rows() != m.rows() {
                return Err(Error::DimensionMismatch {
                    op: "scale_rows",
                    lhs_rows: m.rows(),
                    lhs_cols: m.cols(),
                    rhs_rows: s.rows(),
                    rhs_cols: s.cols(),
                });
            }
            let mut out = m.clone();
            for i in 0..out.rows() {
                let v = s.get(i, 0);
                for o in out.row_mut(i) {
                    *o *= v;
                }
            }
            Ok(out)
        })
    }

    pub fn add_scalar(&self, a: VarId, c: f64) -> VarId {
        self.unary(a, Op::AddScalar(a.0), |x| x.map(|v| v + c))
    }

    pub fn scale(&self, a: VarId, c: f64) -> VarId {
        self.unary(a, Op::Scale(a.0, c), |x| x.scale(c))
    }

    pub fn relu(&self, a: VarId) -> VarId {
        self.unary(a, Op::Relu(a.0), |x| x.map(|v| v.max(0.0)))
    }

    pub fn exp(&self, a: VarId) -> VarId {
        self.unary(a, Op::Exp(a.0), |x| x.map(f64::exp))
    }

    pub fn ln(&self, a: VarId) -> VarId {
        self.unary(a, Op::Ln(a.0), |x| x.map(f64::ln))
    }

    pub fn sqrt(&self, a: VarId) -> VarId {
        self.unary(a, Op::Sqrt(a.0), |x| x.map(f64::sqrt))
    }

    pub fn recip(&self, a: VarId) -> VarId {
        self.unary(a, Op::Recip(a.0), |x| x.map(f64::recip))
    }

    /// Elementwise `max(x, c)`; gradient flows only where `x > c`.
    pub fn clamp_min(&self, a: VarId, c: f64) -> VarId {
        self.unary(a, Op::ClampMin(a.0, c), |x| x.map(|v| v.max(c)))
    }

    pub fn softmax_rows(&self, a: VarId) -> VarId {
        self.unary(a, Op::SoftmaxRows(a.0), Matrix::softmax_rows)
    }

    pub fn softmax_cols(&self, a: VarId) -> VarId {
        self.unary(a, Op::SoftmaxCols(a.0), Matrix::softmax_cols)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum_all(&self, a: VarId) -> VarId {
        self.unary(a, Op::SumAll(a.0), |x| {
            Matrix::from_vec(1, 1, vec![x.sum()]).expect("1x1")
        })
    }

    /// Per-row sums as an `n x 1` node.
    pub fn sum_rows(&self, a: VarId) -> VarId {
        self.unary(a, Op::SumRows(a.0), Matrix::sum_rows)
    }

    /// Per-column sums as a `1 x m` node.
    pub fn sum_cols(&self, a: VarId) -> VarId {
        self.unary(a, Op::SumCols(a.0), Matrix::sum_cols)
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node;
    /// nodes not on a path to the root keep a zero gradient.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        {
            let v = &nodes[root.0].value;
            if v.rows() != 1 || v.cols() != 1 {
                return Err(Error::Contract(format!(
                    "backward root must be 1x1, got {}x{}",
                    v.rows(),
                    v.cols()
                )));
            }
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(&nodes[b].value)?;
                    let gb = nodes[a].value.matmul_tn(&g)?;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, a, g.zip_map(&nodes[b].value, |p, q| p * q)?);
                    accumulate(&mut grads, b, g.zip_map(&nodes[a].value, |p, q| p * q)?);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[b].value;
                    accumulate(&mut grads, a, g.zip_map(bv, |p, q| p / q)?);
                    let av = &nodes[a].value;
                    let gb = g
                        .zip_map(av, |p, q| p * q)?
                        .zip_map(bv, |p, q| -p / (q * q))?;
                    accumulate(&mut grads, b, gb);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, r, g.sum_cols());
                    accumulate(&mut grads, a, g.clone());
                }
                Op::AddCol(a, c) => {
                    accumulate(&mut grads, c, g.sum_rows());
                    accumulate(&mut grads, a, g.clone());
                }
                Op::ScaleRows(a, s) => {
                    let av = &nodes[a].value;
                    let sv = &nodes[s].value;
                    let mut gs = Matrix::zeros(sv.rows(), 1);
                    for i in 0..g.rows() {
                        let dot: f64 = g
                            .row(i)
                            .iter()
                            .zip(av.row(i).iter())
                            .map(|(&p, &q)| p * q)
                            .sum();
                        gs.set(i, 0, dot);
                    }
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let v = sv.get(i, 0);
                        for x in ga.row_mut(i) {
                            *x *= v;
                        }
                    }
                    accumulate(&mut grads, s, gs);
                    accumulate(&mut grads, a, ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, a, g.clone()),
                Op::Scale(a, c) => accumulate(&mut grads, a, g.scale(c)),
                Op::Relu(a) => {
                    let ga = g.zip_map(&nodes[a].value, |p, x| if x > 0.0 { p } else { 0.0 })?;
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, a, g.zip_map(&node.value, |p, e| p * e)?),
                Op::Ln(a) => accumulate(&mut grads, a, g.zip_map(&nodes[a].value, |p, x| p / x)?),
                Op::Sqrt(a) => {
                    accumulate(&mut grads, a, g.zip_map(&node.value, |p, s| p / (2.0 * s))?)
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(&nodes[a].value, |p, x| -p / (x * x))?;
                    accumulate(&mut grads, a, ga);
                }
                Op::ClampMin(a, c) => {
                    let ga = g.zip_map(&nodes[a].value, |p, x| if x > c { p } else { 0.0 })?;
                    accumulate(&mut grads, a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut ga = Matrix::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let dot: f64 = g
                            .row(i)
                            .iter()
                            .zip(s.row(i).iter())
                            .map(|(&p, &q)| p * q)
                            .sum();
                        for (x, (&gv, &sv)) in ga
                            .row_mut(i)
                            .iter_mut()
                            .zip(g.row(i).iter().zip(s.row(i).iter()))
                        {
                            *x = sv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SoftmaxCols(a) => {
                    let s = &node.value;
                    let mut ga = Matrix::zeros(s.rows(), s.cols());
                    for j in 0..s.cols() {
                        let mut dot = 0.0;
                        for i in 0..s.rows() {
                            dot += g.get(i, j) * s.get(i, j);
                        }
                        for i in 0..s.rows() {
                            ga.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = (nodes[a].value.rows(), nodes[a].value.cols());
                    accumulate(&mut grads, a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::SumRows(a) => {
                    let (r, c) = (nodes[a].value.rows(), nodes[a].value.cols());
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let v = g.get(i, 0);
                        for x in ga.row_mut(i) {
                            *x = v;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = (nodes[a].value.rows(), nodes[a].value.cols());
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for (x, &v) in ga.row_mut(i).iter_mut().zip(g.row(0).iter()) {
                            *x = v;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
            }
            // restore: the slot stays readable after the sweep
            grads[i] = Some(g);
        }

        let shapes = nodes
            .iter()
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
    match &mut grads[idx] {
        Some(g) => {
            g.add_scaled_assign(&delta, 1.0).expect("gradient shape");
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zero matrix when the node is detached from the root.
    pub fn wrt(&self, id: VarId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Largest absolute gradient entry for `id` (0 when detached).
    pub fn max_abs(&self, id: VarId) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, Matrix::max_abs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_of_row_softmax_has_zero_gradient() {
        let tape = Tape::new();
        let x =
            tape.param(Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap());
        let root = tape.sum_all(tape.softmax_rows(x));
        let grads = tape.backward(root).unwrap();
        assert!(grads.wrt(x).max_abs() < 1e-14);
    }

    #[test]
    fn frobenius_norm_gradient_is_two_x() {
        let tape = Tape::new();
        let xv = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let x = tape.param(xv.clone());
        let root = tape.sum_all(tape.mul(x, x).unwrap());
        let grads = tape.backward(root).unwrap();
        let expect = xv.scale(2.0);
        assert!(grads.wrt(x).sub(&expect).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn gradients_accumulate_over_multiple_paths() {
        let tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let root = tape.sum_all(tape.add(x, x).unwrap());
        let grads = tape.backward(root).unwrap();
        let g = grads.wrt(x);
        assert_eq!(g.get(0, 0), 2.0);
        assert_eq!(g.get(0, 1), 2.0);
    }

    #[test]
    fn detached_nodes_get_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Matrix::zeros(1, 1));
        let y = tape.param(Matrix::zeros(3, 2));
        let root = tape.sum_all(x);
        let grads = tape.backward(root).unwrap();
        let gy = grads.wrt(y);
        assert_eq!((gy.rows(), gy.cols()), (3, 2));
        assert_eq!(gy.max_abs(), 0.0);
    }
}
