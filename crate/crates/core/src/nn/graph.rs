//! Reverse-mode automatic differentiation over a tape of 2D tensors.

use std::collections::HashMap;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Tanh,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Abs,
    Square,
    Sqrt,
    Sin,
    Cos,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    /// Inverse standard deviation per row.
    LayerNormRows(Var, Vec<f64>),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SparseRows(Var, Vec<Vec<(usize, f64)>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A computation tape. Build the forward pass with the methods below, then call
/// [`Graph::backward`] on a scalar.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Which operand of a binary op is broadcast, given the shapes of `a` and `b`.
fn broadcast_kind(a: (usize, usize), b: (usize, usize)) -> Broadcast {
    if a == b {
        Broadcast::Same
    } else if b == (1, 1) {
        Broadcast::Scalar
    } else if b.0 == 1 && b.1 == a.1 {
        Broadcast::Row
    } else if b.1 == 1 && b.0 == a.0 {
        Broadcast::Col
    } else {
        panic!("cannot broadcast {b:?} onto {a:?}")
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[inline]
fn b_index(kind: Broadcast, cols: usize, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
    }
}

fn reduce_to(kind: Broadcast, g: &Tensor, shape: (usize, usize)) -> Tensor {
    match kind {
        Broadcast::Same => g.clone(),
        _ => {
            let mut out = Tensor::zeros(shape.0, shape.1);
            for (i, v) in g.data.iter().enumerate() {
                out.data[b_index(kind, g.cols, i)] += v;
            }
            out
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Relu => x.max(0.0),
        Unary::Gelu => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Tanh => x.tanh(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let th = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
        Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (gradient still available through [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, v: f64) -> Var {
        self.input(Tensor::filled(rows, cols, v))
    }

    /// Parameter leaf; repeated calls for the same id reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows, bv.rows);
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        self.push(out, Op::MatMulT(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av.shape(), bv.shape());
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data[b_index(kind, av.cols, i)]))
            .collect();
        Tensor::from_vec(av.rows, av.cols, data)
    }

    /// Elementwise `a + b`; `b` may be `1x1`, `1xc` or `nx1`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a).map(|x| unary_forward(kind, x));
        self.push(t, Op::Unary(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for r in 0..t.rows {
            let row = t.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut t = self.value(a).clone();
        let mut inv = Vec::with_capacity(t.rows);
        let n = t.cols as f64;
        for r in 0..t.rows {
            let row = t.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        self.push(t, Op::LayerNormRows(a, inv))
    }

    /// Sum of all entries, `1x1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let t = Tensor::from_vec(v.rows, 1, data);
        self.push(t, Op::SumRows(a))
    }

    /// Column sums, `1 x c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut t = Tensor::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, x) in t.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(t, Op::SumCols(a))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).rows as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                t.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows, "slice_rows out of range");
        let t = Tensor::from_vec(len, v.cols, v.data[start * v.cols..(start + len) * v.cols].to_vec());
        self.push(t, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "slice_cols out of range");
        let mut t = Tensor::zeros(v.rows, len);
        for r in 0..v.rows {
            t.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(t, Op::SliceCols(a, start))
    }

    /// Rows picked by index; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a);
        let mut t = Tensor::zeros(idx.len(), v.cols);
        for (o, &i) in idx.iter().enumerate() {
            t.row_mut(o).copy_from_slice(v.row(i));
        }
        self.push(t, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    /// Same row-major data, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape changes element count");
        let t = Tensor::from_vec(rows, cols, v.data.clone());
        self.push(t, Op::Reshape(a))
    }

    /// Output row `i` is `sum_k w_k * a[j_k]` over the pairs `(j_k, w_k)` of
    /// `rows[i]`. Weights are constants.
    pub fn sparse_rows(&mut self, a: Var, rows: Vec<Vec<(usize, f64)>>) -> Var {
        let v = self.value(a);
        let mut t = Tensor::zeros(rows.len(), v.cols);
        for (o, pairs) in rows.iter().enumerate() {
            for &(j, w) in pairs {
                let src = &v.data[j * v.cols..(j + 1) * v.cols];
                for (x, s) in t.row_mut(o).iter_mut().zip(src) {
                    *x += w * s;
                }
            }
        }
        self.push(t, Op::SparseRows(a, rows))
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a `1x1` node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    gemm(1.0, &g, false, bv, true, 0.0, &mut ga);
                    let mut gb = Tensor::zeros(bv.rows, bv.cols);
                    gemm(1.0, av, true, &g, false, 0.0, &mut gb);
                    Self::acc(&mut grads, *a, ga);
                    Self::acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    gemm(1.0, &g, false, bv, false, 0.0, &mut ga);
                    let mut gb = Tensor::zeros(bv.rows, bv.cols);
                    gemm(1.0, &g, true, av, false, 0.0, &mut gb);
                    Self::acc(&mut grads, *a, ga);
                    Self::acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let bshape = self.nodes[b.0].value.shape();
                    let kind = broadcast_kind(g.shape(), bshape);
                    let mut gb = reduce_to(kind, &g, bshape);
                    if matches!(node.op, Op::Sub(..)) {
                        gb.scale_assign(-1.0);
                    }
                    Self::acc(&mut grads, *b, gb);
                    Self::acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let kind = broadcast_kind(av.shape(), bv.shape());
                    let mut ga = g.clone();
                    let mut gb_full = g.clone();
                    for k in 0..g.data.len() {
                        let bi = b_index(kind, av.cols, k);
                        ga.data[k] *= bv.data[bi];
                        gb_full.data[k] *= av.data[k];
                    }
                    let gb = reduce_to(kind, &gb_full, bv.shape());
                    Self::acc(&mut grads, *a, ga);
                    Self::acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let kind = broadcast_kind(av.shape(), bv.shape());
                    let mut ga = g.clone();
                    let mut gb_full = g.clone();
                    for k in 0..g.data.len() {
                        let y = bv.data[b_index(kind, av.cols, k)];
                        ga.data[k] /= y;
                        gb_full.data[k] *= -av.data[k] / (y * y);
                    }
                    let gb = reduce_to(kind, &gb_full, bv.shape());
                    Self::acc(&mut grads, *a, ga);
                    Self::acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    Self::acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => Self::acc(&mut grads, *a, g.clone()),
                Op::Unary(a, kind) => {
                    let xv = &self.nodes[a.0].value;
                    let yv = &node.value;
                    let data = g
                        .data
                        .iter()
                        .zip(xv.data.iter().zip(&yv.data))
                        .map(|(gi, (&x, &y))| gi * unary_derivative(*kind, x, y))
                        .collect();
                    Self::acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yy, gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yy * (gg - dot);
                        }
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, inv) => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (o, (yy, gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = inv[r] * (gg - mg - yy * mgy);
                        }
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    Self::acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.data[i]);
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(&g.data);
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts.clone() {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let part = Tensor::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec());
                        Self::acc(&mut grads, p, part);
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts.clone() {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let mut part = Tensor::zeros(r, c);
                        for i in 0..r {
                            part.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        Self::acc(&mut grads, p, part);
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                    Self::acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..start + g.cols].copy_from_slice(g.row(i));
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (o, &i) in idx.iter().enumerate() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                            *x += y;
                        }
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => Self::acc(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    Self::acc(&mut grads, *a, Tensor::from_vec(r, c, g.data.clone()));
                }
                Op::SparseRows(a, rows) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (o, pairs) in rows.iter().enumerate() {
                        for &(j, w) in pairs {
                            for (x, y) in ga.row_mut(j).iter_mut().zip(g.row(o)) {
                                *x += w * y;
                            }
                        }
                    }
                    Self::acc(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Adds the parameter gradients of the last backward pass into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) {
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = self.grad(v) {
                grads.add(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences on the inputs of a scalar function built on a fresh graph.
    fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            let mut numeric = Tensor::zeros(t.rows, t.cols);
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut gg = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                x.data[i] += delta;
                            }
                            gg.input(x)
                        })
                        .collect();
                    let o = f(&mut gg, &vs);
                    gg.value(o).item()
                };
                numeric.data[i] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let diff: f64 = analytic
                .data
                .iter()
                .zip(&numeric.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic
                .norm_squared()
                .sqrt()
                .max(numeric.norm_squared().sqrt())
                .max(1e-8);
            assert!(
                diff / scale < 1e-6,
                "input {k}: analytic {:?} numeric {:?}",
                analytic.data,
                numeric.data
            );
        }
    }

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weights(g: &mut Graph, v: Var, seed: u64) -> Var {
        // Random linear functional so every output entry matters.
        let (r, c) = g.shape(v);
        let w = g.input(rand(r, c, seed + 1000));
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn matmul_grads() {
        check(&[rand(3, 4, 0), rand(4, 2, 1)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            weights(g, m, 0)
        });
        check(&[rand(3, 4, 2), rand(5, 4, 3)], |g, v| {
            let m = g.matmul_t(v[0], v[1]);
            weights(g, m, 1)
        });
    }

    #[test]
    fn broadcast_grads() {
        for (bs, seed) in [((3, 4), 0u64), ((1, 4), 1), ((3, 1), 2), ((1, 1), 3)] {
            let a = rand(3, 4, seed);
            let b = rand(bs.0, bs.1, seed + 10).map(|x| x.abs() + 0.5);
            check(&[a.clone(), b.clone()], |g, v| {
                let s = g.add(v[0], v[1]);
                let d = g.sub(s, v[1]);
                let d = g.sub(d, v[1]);
                let m = g.mul(d, v[1]);
                let q = g.div(m, v[1]);
                let q = g.div(q, v[1]);
                weights(g, q, seed)
            });
        }
    }

    #[test]
    fn unary_grads() {
        let kinds = [
            Unary::Relu,
            Unary::Gelu,
            Unary::Tanh,
            Unary::Exp,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Abs,
            Unary::Square,
            Unary::Sin,
            Unary::Cos,
        ];
        for (i, k) in kinds.into_iter().enumerate() {
            check(&[rand(3, 3, i as u64)], |g, v| {
                let y = g.unary(v[0], k);
                weights(g, y, 7)
            });
        }
        let pos = rand(3, 3, 50).map(|x| x.abs() + 0.3);
        for k in [Unary::Log, Unary::Sqrt] {
            check(std::slice::from_ref(&pos), |g, v| {
                let y = g.unary(v[0], k);
                weights(g, y, 8)
            });
        }
    }

    #[test]
    fn row_op_grads() {
        check(&[rand(3, 5, 0)], |g, v| {
            let y = g.softmax_rows(v[0]);
            weights(g, y, 1)
        });
        check(&[rand(3, 5, 2)], |g, v| {
            let y = g.layer_norm_rows(v[0], 1e-5);
            weights(g, y, 2)
        });
        check(&[rand(3, 5, 3)], |g, v| {
            let a = g.sum_rows(v[0]);
            let b = g.sum_cols(v[0]);
            let c = g.mean_cols(v[0]);
            let (x, y, z) = (weights(g, a, 1), weights(g, b, 2), weights(g, c, 3));
            let s = g.add(x, y);
            g.add(s, z)
        });
    }

    #[test]
    fn structural_grads() {
        check(&[rand(2, 3, 0), rand(4, 3, 1), rand(2, 2, 2)], |g, v| {
            let r = g.concat_rows(&[v[0], v[1], v[0]]);
            let sl = g.slice_rows(r, 1, 4);
            let sc = g.slice_cols(sl, 1, 2);
            let t = g.transpose(sc);
            let rs = g.reshape(t, 4, 2);
            let ga = g.gather_rows(rs, &[3, 0, 3, 1]);
            let cc = g.concat_cols(&[ga, ga]);
            let sp = g.sparse_rows(cc, vec![vec![(0, 0.25), (2, 0.75)], vec![(1, -1.0)], vec![]]);
            let m = g.matmul(v[2], v[2]);
            let a = weights(g, sp, 1);
            let b = weights(g, m, 2);
            g.add(a, b)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(rand(4, 6, 9).map(|v| v * 50.0));
        let y = g.softmax_rows(x);
        for r in 0..4 {
            assert!((g.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
