//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Calling
//! [`Tape::backward`] on a scalar (1x1) result walks the record in reverse
//! and accumulates adjoints. Only the operations needed by the layers in
//! [`crate::nn`] are provided.
//!
//! Shape misuse inside a tape is a programming error and panics; the layer
//! entry points validate user-supplied shapes and return errors instead.

use std::cell::RefCell;
use std::rc::Rc;

use crate::matrix::{CsrMatrix, Matrix};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Transpose(usize),
    HCat(Vec<usize>),
    LinComb(Vec<usize>, usize),
    SpMM(usize, Rc<CsrMatrix>),
    Reshape(usize),
    SelectRows(usize, Rc<Vec<usize>>),
    Sum(usize),
    MaskedSoftmax(usize, Rc<Vec<bool>>),
    LogSoftmax(usize),
    PairSqDist(usize, usize),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Matrix> {
        self.grads[v.id].as_ref()
    }

    /// Adjoint of `v`, or zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.shape(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let mut acc = |target: usize, delta: Matrix| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing
                        .axpy(1.0, &delta)
                        .expect("adjoint shape matches value shape"),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul_t(bv).unwrap());
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, av.t_matmul(&g).unwrap());
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul(bv).unwrap());
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, g.t_matmul(av).unwrap());
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(*a, g.hadamard(bv).unwrap());
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, g.hadamard(av).unwrap());
                    }
                }
                Op::AddRow(a, r) => {
                    if nodes[*r].needs_grad {
                        acc(*r, col_sums(&g));
                    }
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (&nodes[*a].value, &nodes[*r].value);
                    if nodes[*r].needs_grad {
                        acc(*r, col_sums(&g.hadamard(av).unwrap()));
                    }
                    if nodes[*a].needs_grad {
                        acc(*a, broadcast_row(&g, rv, |x, s| x * s));
                    }
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (&nodes[*a].value, &nodes[*c].value);
                    if nodes[*c].needs_grad {
                        acc(*c, row_sums(&g.hadamard(av).unwrap()));
                    }
                    if nodes[*a].needs_grad {
                        acc(*a, broadcast_col(&g, cv));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Relu(a) => {
                    let d = g.zip_map(&nodes[*a].value, |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(*a, d.unwrap());
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(&nodes[*a].value, |g, x| g * sigmoid(x));
                    acc(*a, d.unwrap());
                }
                Op::Sigmoid(a) => acc(*a, g.zip_map(y, |g, s| g * s * (1.0 - s)).unwrap()),
                Op::Tanh(a) => acc(*a, g.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap()),
                Op::Exp(a) => acc(*a, g.hadamard(y).unwrap()),
                Op::Log(a) => acc(*a, g.zip_map(&nodes[*a].value, |g, x| g / x).unwrap()),
                Op::Square(a) => {
                    acc(*a, g.zip_map(&nodes[*a].value, |g, x| 2.0 * g * x).unwrap())
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::HCat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        if nodes[p].needs_grad {
                            acc(p, g.col_range(start, start + w));
                        }
                        start += w;
                    }
                }
                Op::LinComb(parts, w) => {
                    let wv = &nodes[*w].value;
                    if nodes[*w].needs_grad {
                        let dw: Vec<f64> = parts
                            .iter()
                            .map(|&p| {
                                nodes[p].value.as_slice().iter().zip(g.as_slice()).map(|(x, y)| x * y).sum()
                            })
                            .collect();
                        acc(*w, Matrix::column(&dw));
                    }
                    for (k, &p) in parts.iter().enumerate() {
                        if nodes[p].needs_grad {
                            acc(p, g.scale(wv.as_slice()[k]));
                        }
                    }
                }
                Op::SpMM(a, sp) => acc(*a, sp.t_matmul(&g)),
                Op::Reshape(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(*a, g.reshape(r, c).unwrap());
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(*a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::MaskedSoftmax(a, mask) => {
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let base = r * y.cols();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            if mask[base + c] {
                                *o = yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::LogSoftmax(a) => {
                    let mut d = g.clone();
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for (o, ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= ly.exp() * gs;
                        }
                    }
                    acc(*a, d);
                }
                Op::PairSqDist(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        // dA_i = 2 (Σ_j g_ij) a_i − 2 Σ_j g_ij b_j
                        let mut d = g.matmul(bv).unwrap().scale(-2.0);
                        let rs = row_sums(&g);
                        for i in 0..av.rows() {
                            let s = 2.0 * rs[(i, 0)];
                            for (o, x) in d.row_mut(i).iter_mut().zip(av.row(i)) {
                                *o += s * x;
                            }
                        }
                        acc(*a, d);
                    }
                    if nodes[*b].needs_grad {
                        let mut d = g.t_matmul(av).unwrap().scale(-2.0);
                        let cs = col_sums(&g);
                        for j in 0..bv.rows() {
                            let s = 2.0 * cs[(0, j)];
                            for (o, x) in d.row_mut(j).iter_mut().zip(bv.row(j)) {
                                *o += s * x;
                            }
                        }
                        acc(*b, d);
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn row_sums(m: &Matrix) -> Matrix {
    let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect::<Vec<_>>();
    Matrix::column(&data)
}

fn broadcast_row(m: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (o, s) in out.row_mut(r).iter_mut().zip(row.as_slice()) {
            *o = f(*o, *s);
        }
    }
    out
}

fn broadcast_col(m: &Matrix, col: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = col[(r, 0)];
        out.row_mut(r).iter_mut().for_each(|o| *o *= s);
    }
    out
}

/// Squared Euclidean distance between every row of `a` and every row of `b`.
pub fn pair_sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "pair_sq_dist width mismatch");
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    out
}

/// [`pair_sq_dist`] through `‖a‖² + ‖b‖² − 2abᵀ`, clamped at zero.
fn gram_sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "pair_sq_dist width mismatch");
    let sq = |m: &Matrix| -> Vec<f64> { (0..m.rows()).map(|i| m.row(i).iter().map(|x| x * x).sum()).collect() };
    let (na, nb) = (sq(a), sq(b));
    let mut out = a.matmul_t(b).expect("widths checked");
    for i in 0..a.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
        }
    }
    out
}

/// Row-wise softmax restricted to entries where `mask` is true. Rows without
/// any admitted entry are all zero.
pub fn masked_softmax(x: &Matrix, mask: &[bool]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let base = r * x.cols();
        let xr = x.row(r);
        let max = xr
            .iter()
            .enumerate()
            .filter(|(c, _)| mask[base + c])
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = out.row_mut(r);
        let mut z = 0.0;
        for (c, o) in orow.iter_mut().enumerate() {
            if mask[base + c] {
                *o = (xr[c] - max).exp();
                z += *o;
            }
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    /// The tape this variable is recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Scalar value of a 1x1 variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "item() on a non-scalar");
        v[(0, 0)]
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'t> {
        let ng = self.tape.needs(self.id);
        self.tape.push(value, op, ng)
    }

    fn binary(self, other: Var<'t>, value: Matrix, op: Op) -> Var<'t> {
        let ng = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, ng)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul(&other.value()).expect("matmul shapes");
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul_t(&other.value()).expect("matmul_t shapes");
        self.binary(other, v, Op::MatMulT(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().add(&other.value()).expect("add shapes");
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().sub(&other.value()).expect("sub shapes");
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().hadamard(&other.value()).expect("mul shapes");
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    /// Adds a 1xC row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (x, r) = (self.value(), row.value());
        assert_eq!((1, x.cols()), r.shape(), "add_row shapes");
        let v = broadcast_row(&x, &r, |a, b| a + b);
        self.binary(row, v, Op::AddRow(self.id, row.id))
    }

    /// Scales column `c` of every row by `row[c]`.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (x, r) = (self.value(), row.value());
        assert_eq!((1, x.cols()), r.shape(), "mul_row shapes");
        let v = broadcast_row(&x, &r, |a, b| a * b);
        self.binary(row, v, Op::MulRow(self.id, row.id))
    }

    /// Scales row `r` by `col[r]`.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (x, c) = (self.value(), col.value());
        assert_eq!((x.rows(), 1), c.shape(), "mul_col shapes");
        let v = broadcast_col(&x, &c);
        self.binary(col, v, Op::MulCol(self.id, col.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let v = (*self.value()).clone().reshape(rows, cols).expect("reshape size");
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let v = self.value().select_rows(idx);
        self.unary(v, Op::SelectRows(self.id, Rc::new(idx.to_vec())))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row softmax over entries admitted by `mask` (row-major, same shape).
    pub fn masked_softmax(self, mask: Rc<Vec<bool>>) -> Var<'t> {
        let x = self.value();
        assert_eq!(mask.len(), x.len(), "mask shape");
        let v = masked_softmax(&x, &mask);
        self.unary(v, Op::MaskedSoftmax(self.id, mask))
    }

    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let mut v = (*x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|a| *a -= lse);
        }
        self.unary(v, Op::LogSoftmax(self.id))
    }

    /// Squared distances between rows of `self` and rows of `other`.
    /// `s · self` for a constant sparse `s`.
    pub fn spmm(self, s: &Rc<CsrMatrix>) -> Var<'t> {
        let v = s.matmul(&self.value());
        self.unary(v, Op::SpMM(self.id, Rc::clone(s)))
    }

    pub fn pair_sq_dist(self, other: Var<'t>) -> Var<'t> {
        let v = gram_sq_dist(&self.value(), &other.value());
        self.binary(other, v, Op::PairSqDist(self.id, other.id))
    }
}

/// Column-wise concatenation.
pub fn hcat<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts.first().expect("hcat of nothing").tape;
    let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Matrix> = values.iter().map(|v| v.as_ref()).collect();
    let v = Matrix::hcat(&refs).expect("hcat row counts");
    let ng = parts.iter().any(|p| tape.needs(p.id));
    tape.push(v, Op::HCat(parts.iter().map(|p| p.id).collect()), ng)
}

/// `Σ_k weights[k] · parts[k]` for equally shaped parts and a `k x 1`
/// weight column.
pub fn lin_comb<'t>(parts: &[Var<'t>], weights: Var<'t>) -> Var<'t> {
    let tape = weights.tape;
    let w = weights.value();
    assert_eq!(w.shape(), (parts.len(), 1), "one weight per part");
    let (r, c) = parts.first().expect("lin_comb of nothing").shape();
    let mut out = Matrix::zeros(r, c);
    for (p, &wk) in parts.iter().zip(w.as_slice()) {
        out.axpy(wk, &p.value()).expect("lin_comb shapes");
    }
    let ng = tape.needs(weights.id) || parts.iter().any(|p| tape.needs(p.id));
    tape.push(out, Op::LinComb(parts.iter().map(|p| p.id).collect(), weights.id), ng)
}
