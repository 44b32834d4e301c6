//! Layer primitives: multilayer perceptrons, GCN propagation, masked graph
//! multi-head attention, the Adam optimizer and a finite-difference gradient
//! oracle.
//!
//! Layers own their parameters as plain [`Matrix`] values. To differentiate,
//! a model's tensors are bound onto a [`Tape`] with [`bind`] (in
//! [`Params::tensors`] order) and the `forward` methods consume the bound
//! slice.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{lin_comb, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::{CsrMatrix, Matrix};

/// Ordered access to a model's trainable tensors.
pub trait Params {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    /// Checkpoint names, parallel to [`Params::tensors`].
    fn tensor_names(&self) -> Vec<String>;

    fn num_tensors(&self) -> usize {
        self.tensors().len()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters flattened in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`Params::flatten`].
    fn unflatten(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "parameter vector length");
    }
}

/// Records every tensor of `model` on `tape` as a differentiable leaf.
pub fn bind<'t, P: Params + ?Sized>(tape: &'t Tape, model: &P) -> Vec<Var<'t>> {
    model.tensors().into_iter().map(|m| tape.var(m.clone())).collect()
}

/// Uniform Glorot initialization in `±√(6/(fan_in+fan_out))`.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("glorot shape")
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1/(1-rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("mask shape")
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Identity,
    /// Strictly positive outputs.
    Softplus,
    /// Outputs in (0, 1).
    Sigmoid,
}

impl Head {
    pub fn code(self) -> f64 {
        match self {
            Head::Identity => 0.0,
            Head::Softplus => 1.0,
            Head::Sigmoid => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(Head::Identity),
            1 => Ok(Head::Softplus),
            2 => Ok(Head::Sigmoid),
            _ => Err(Error::invalid(format!("unknown head code {code}"))),
        }
    }
}

/// Affine layers with ReLU between them and a configurable output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub head: Head,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], head: Head, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let weights = dims.windows(2).map(|w| glorot(w[0], w[1], rng)).collect();
        let biases = dims[1..].iter().map(|&d| Matrix::zeros(1, d)).collect();
        Mlp {
            weights,
            biases,
            head,
        }
    }

    pub fn from_layers(weights: Vec<Matrix>, biases: Vec<Matrix>, head: Head) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("MLP needs matching, non-empty weight/bias lists"));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if b.shape() != (1, w.cols()) {
                return Err(Error::shape("Mlp", format!("bias {i} is {:?}", b.shape())));
            }
            if i > 0 && weights[i - 1].cols() != w.rows() {
                return Err(Error::shape("Mlp", format!("layer {i} does not chain")));
            }
        }
        Ok(Mlp {
            weights,
            biases,
            head,
        })
    }

    pub fn in_width(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_width(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols())
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Output before the head nonlinearity.
    pub fn forward_logits<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        assert_eq!(p.len(), 2 * self.depth(), "bound MLP tensors");
        let last = self.depth() - 1;
        let mut h = x;
        for l in 0..=last {
            h = h.matmul(p[2 * l]).add_row(p[2 * l + 1]);
            if l < last {
                h = h.relu();
            }
        }
        h
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let h = self.forward_logits(p, x);
        match self.head {
            Head::Identity => h,
            Head::Softplus => h.softplus(),
            Head::Sigmoid => h.sigmoid(),
        }
    }

    pub fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_width() {
            return Err(Error::shape(
                "mlp_apply",
                format!("input width {} but MLP expects {}", x.cols(), self.in_width()),
            ));
        }
        Ok(())
    }
}

impl Params for Mlp {
    fn tensors(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.depth())
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }
}

/// Evaluates the MLP on the rows of `x`.
pub fn mlp_apply(p: &Mlp, x: &Matrix) -> Result<Matrix> {
    p.check_input(x)?;
    let tape = Tape::new();
    let vars: Vec<Var> = p.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
    let out = p.forward(&vars, tape.constant(x.clone()));
    let v = out.value();
    Ok((*v).clone())
}

// ---------------------------------------------------------------------------
// GCN

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for a nonnegative (possibly weighted)
/// adjacency matrix.
pub fn normalized_adjacency(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("normalized_adjacency", format!("{:?}", a.shape())));
    }
    let mut tilde = a.clone();
    for i in 0..n {
        tilde[(i, i)] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / tilde.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        let di = inv_sqrt[i];
        for (j, v) in tilde.row_mut(i).iter_mut().enumerate() {
            *v *= di * inv_sqrt[j];
        }
    }
    Ok(tilde)
}

/// Sparse `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected edge list over `n`
/// nodes (`u ≠ v`, each edge listed once).
pub fn propagation_from_edges(n: usize, edges: &[(usize, usize)]) -> CsrMatrix {
    let mut degree = vec![1.0; n];
    for &(u, v) in edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for i in 0..n {
        triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
    }
    for &(u, v) in edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Sparse form of [`normalized_adjacency`].
pub fn propagation(a: &Matrix) -> Result<CsrMatrix> {
    Ok(CsrMatrix::from_dense(&normalized_adjacency(a)?))
}

/// Undirected edges `(u, v)`, `u < v`, of a binary adjacency.
pub fn edge_list(a: &Matrix) -> Vec<(usize, usize)> {
    let n = a.rows();
    let mut out = Vec::new();
    for u in 0..n {
        for (v, &x) in a.row(u).iter().enumerate().skip(u + 1) {
            if x != 0.0 {
                out.push((u, v));
            }
        }
    }
    out
}

/// `ReLU(D̃^{-1/2} Ã D̃^{-1/2} · h · w)` with `Ã = a + I`.
pub fn gcn_layer(h: &Matrix, a: &Matrix, w: &Matrix) -> Result<Matrix> {
    if h.rows() != a.rows() {
        return Err(Error::shape(
            "gcn_layer",
            format!("{} feature rows vs {} adjacency rows", h.rows(), a.rows()),
        ));
    }
    if h.cols() != w.rows() {
        return Err(Error::shape(
            "gcn_layer",
            format!("feature width {} vs weight rows {}", h.cols(), w.rows()),
        ));
    }
    let norm = normalized_adjacency(a)?;
    Ok(norm.matmul(&h.matmul(w)?)?.map(|v| v.max(0.0)))
}

/// Stack of GCN layers with ReLU activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Gcn {
    pub weights: Vec<Matrix>,
    pub dropout: f64,
}

impl Gcn {
    pub fn new<R: Rng + ?Sized>(in_width: usize, hidden: usize, layers: usize, dropout: f64, rng: &mut R) -> Self {
        assert!((0.0..1.0).contains(&dropout), "dropout must be in [0, 1)");
        let mut weights = Vec::with_capacity(layers);
        let mut width = in_width;
        for _ in 0..layers {
            weights.push(glorot(width, hidden, rng));
            width = hidden;
        }
        Gcn { weights, dropout }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn in_width(&self) -> usize {
        self.weights.first().map_or(0, |w| w.rows())
    }

    pub fn hidden(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols())
    }

    /// Hidden states `H_1..H_L` under the normalized propagation matrix
    /// `prop`. Dropout is applied to each layer input only when `rng` is
    /// given and the rate is positive.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        h0: Var<'t>,
        prop: &Rc<CsrMatrix>,
        mut rng: Option<&mut R>,
    ) -> Vec<Var<'t>> {
        assert_eq!(p.len(), self.layers(), "bound GCN tensors");
        let mut states = Vec::with_capacity(self.layers());
        let mut h = h0;
        for w in p {
            let input = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let (rows, cols) = h.shape();
                    let mask = dropout_mask(rows, cols, self.dropout, r);
                    h.mul(constant_like(h, mask))
                }
                _ => h,
            };
            h = input.matmul(*w).spmm(prop).relu();
            states.push(h);
        }
        states
    }
}

impl Params for Gcn {
    fn tensors(&self) -> Vec<&Matrix> {
        self.weights.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights.iter_mut().collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers()).map(|l| format!("{l}.weight")).collect()
    }
}

/// A constant on the same tape as `like`.
pub(crate) fn constant_like<'t>(like: Var<'t>, m: Matrix) -> Var<'t> {
    like.tape().constant(m)
}

// ---------------------------------------------------------------------------
// Graph multi-head attention

/// Query/key/value projections of one attention block; each is
/// `in_width x (heads * head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmhBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Graph multi-head attention over every (hidden state, adjacency power)
/// pair.
///
/// For block `(i, κ)` and head `h` the attention map is a row softmax of
/// `Q Kᵀ/√d` restricted to pairs with `A^κ[u][v] > 0`. Each head contributes
/// two edge channels: the attention map itself and the similarity `O Oᵀ/d` of
/// its attended values `O = P V`. All channels are concatenated per entry and
/// linearly projected to one n x n edge map.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmh {
    pub heads: usize,
    pub head_dim: usize,
    pub powers: usize,
    pub blocks: Vec<GmhBlock>,
    /// `channels x 1`.
    pub proj: Matrix,
    /// `1 x 1`.
    pub proj_bias: Matrix,
}

impl Gmh {
    /// One block per (state width, power) pair, state-major.
    pub fn new<R: Rng + ?Sized>(
        state_widths: &[usize],
        powers: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let width = heads * head_dim;
        let mut blocks = Vec::with_capacity(state_widths.len() * powers);
        for &w in state_widths {
            for _ in 0..powers {
                blocks.push(GmhBlock {
                    wq: glorot(w, width, rng),
                    wk: glorot(w, width, rng),
                    wv: glorot(w, width, rng),
                });
            }
        }
        let channels = 2 * heads * blocks.len();
        Gmh {
            heads,
            head_dim,
            powers,
            proj: glorot(channels, 1, rng),
            proj_bias: Matrix::zeros(1, 1),
            blocks,
        }
    }

    pub fn block_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn channels(&self) -> usize {
        2 * self.heads * self.blocks.len()
    }

    pub fn check_inputs(&self, hidden: &[Matrix], powers: &[Matrix]) -> Result<()> {
        if hidden.is_empty() {
            return Err(Error::invalid("gmh_attention needs at least one hidden state"));
        }
        let n = hidden[0].rows();
        if hidden.iter().chain(powers).any(|m| m.rows() != n) {
            return Err(Error::shape("gmh_attention", "row counts differ"));
        }
        if powers.iter().any(|m| m.cols() != n) {
            return Err(Error::shape("gmh_attention", "adjacency powers must be n x n"));
        }
        if powers.len() != self.powers || hidden.len() * self.powers != self.blocks.len() {
            return Err(Error::shape(
                "gmh_attention",
                format!(
                    "{} states x {} powers for {} blocks",
                    hidden.len(),
                    powers.len(),
                    self.blocks.len()
                ),
            ));
        }
        for (i, h) in hidden.iter().enumerate() {
            let expected = self.blocks[i * self.powers].wq.rows();
            if h.cols() != expected {
                return Err(Error::shape(
                    "gmh_attention",
                    format!("state {i} width {} vs {expected}", h.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Edge map (`n x n`). `masks[κ]` admits pair (u,v) of power κ.
    pub fn forward<'t>(&self, p: &[Var<'t>], hidden: &[Var<'t>], masks: &[Rc<Vec<bool>>]) -> Var<'t> {
        assert_eq!(p.len(), self.num_tensors(), "bound GMH tensors");
        let n = hidden[0].shape().0;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut channels = Vec::with_capacity(self.channels());
        for (b, _) in self.blocks.iter().enumerate() {
            let state = hidden[b / self.powers];
            let mask = &masks[b % self.powers];
            let q = state.matmul(p[3 * b]);
            let k = state.matmul(p[3 * b + 1]);
            let v = state.matmul(p[3 * b + 2]);
            for h in 0..self.heads {
                let cols: Vec<usize> = (h * self.head_dim..(h + 1) * self.head_dim).collect();
                let (qh, kh, vh) = (col_select(q, &cols), col_select(k, &cols), col_select(v, &cols));
                let attn = qh.matmul_t(kh).scale(scale).masked_softmax(Rc::clone(mask));
                let out = attn.matmul(vh);
                let sim = out.matmul_t(out).scale(1.0 / self.head_dim as f64);
                channels.push(attn);
                channels.push(sim);
            }
        }
        let proj = p[p.len() - 2];
        let bias = p[p.len() - 1];
        let ones = bias.tape().constant(Matrix::filled(n, n, 1.0));
        lin_comb(&channels, proj).add(lin_comb(&[ones], bias))
    }

    /// Per-head attention maps for one block, without projection.
    pub fn attention_maps(&self, block: usize, state: &Matrix, mask: &[bool]) -> Result<Vec<Matrix>> {
        let blk = &self.blocks[block];
        let q = state.matmul(&blk.wq)?;
        let k = state.matmul(&blk.wk)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * self.head_dim, (h + 1) * self.head_dim);
            let logits = q.col_range(s, e).matmul_t(&k.col_range(s, e))?.scale(scale);
            maps.push(crate::autodiff::masked_softmax(&logits, mask));
        }
        Ok(maps)
    }
}

fn col_select<'t>(x: Var<'t>, cols: &[usize]) -> Var<'t> {
    // Column gather expressed as a transpose-row-gather-transpose so the
    // adjoint comes for free.
    x.t().select_rows(cols).t()
}

impl Params for Gmh {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self
            .blocks
            .iter()
            .flat_map(|b| [&b.wq, &b.wk, &b.wv])
            .collect();
        out.push(&self.proj);
        out.push(&self.proj_bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .blocks
            .iter_mut()
            .flat_map(|b| [&mut b.wq, &mut b.wk, &mut b.wv])
            .collect();
        out.push(&mut self.proj);
        out.push(&mut self.proj_bias);
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.blocks.len())
            .flat_map(|b| [format!("{b}.wq"), format!("{b}.wk"), format!("{b}.wv")])
            .collect();
        out.push("proj".into());
        out.push("proj_bias".into());
        out
    }
}

/// Attention masks for `(A + I)^κ > 0`, κ = 1..=k, from a binary adjacency.
pub fn power_masks(adjacency: &Matrix, k: usize) -> Result<Vec<Rc<Vec<bool>>>> {
    let n = adjacency.rows();
    let mut base = adjacency.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    for i in 0..n {
        base[(i, i)] = 1.0;
    }
    let mut power = base.clone();
    let mut masks = Vec::with_capacity(k);
    for step in 0..k {
        if step > 0 {
            power = power.matmul(&base)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        }
        masks.push(Rc::new(power.as_slice().iter().map(|&v| v > 0.0).collect()));
    }
    Ok(masks)
}

/// Masked multi-head attention edge map on plain matrices.
///
/// `adjacency_powers[κ]` admits pair (u,v) where it is positive.
pub fn gmh_attention(params: &Gmh, hidden_states: &[Matrix], adjacency_powers: &[Matrix]) -> Result<Matrix> {
    params.check_inputs(hidden_states, adjacency_powers)?;
    let tape = Tape::new();
    let vars: Vec<Var> = params.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
    let hidden: Vec<Var> = hidden_states.iter().map(|h| tape.constant(h.clone())).collect();
    let masks: Vec<Rc<Vec<bool>>> = adjacency_powers
        .iter()
        .map(|a| Rc::new(a.as_slice().iter().map(|&v| v > 0.0).collect()))
        .collect();
    let out = params.forward(&vars, &hidden, &masks);
    let v = out.value();
    Ok((*v).clone())
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new<P: Params + ?Sized>(model: &P, lr: f64) -> Self {
        let zeros: Vec<Matrix> = model
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: Params + ?Sized>(&mut self, model: &mut P, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let tensors = model.tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "one gradient per tensor");
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of `loss` at `p`.
pub fn finite_diff_grad(mut loss: impl FnMut(&[f64]) -> f64, p: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
