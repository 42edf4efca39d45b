//! A small reverse-mode automatic differentiation tape over 2-D `f64` matrices.
//!
//! Every value is a [`Matrix`]; batched sequences are laid out as stacked rows
//! (`batch * seq_len` rows), so row-wise operations are batch-agnostic and the
//! fused [`Graph::attention`] op handles per-sequence attention.

use std::collections::HashMap;

use rand::Rng;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64> },
    RowL2(Var),
    SumCols(Var),
    Sum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, q_len: usize, kv_len: usize, probs: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that tracks gradients for every trainable parameter it binds.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), track_params: true }
    }

    /// A graph that binds every parameter as a constant (inference, frozen models).
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), track_params: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient; used by tests to differentiate w.r.t. inputs.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Frozen parameters, and every parameter of an
    /// inference graph, enter the tape as constants and never receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = self.track_params && !store.is_frozen(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound with gradient tracking, in binding order.
    pub fn tracked_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<(ParamId, Var)> =
            self.bound.iter().filter(|(_, v)| self.rg(**v)).map(|(p, v)| (*p, *v)).collect();
        out.sort_by_key(|(_, v)| v.0);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` element-wise by a `1×C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut value = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in value.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut value = Matrix::zeros(r, c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = crate::tensor::l2_norm(x.row(i));
            if n > 0.0 {
                for (o, v) in value.row_mut(i).iter_mut().zip(x.row(i)) {
                    *o = v / n;
                }
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize { x: a, norms }, rg)
    }

    /// L2 norm of each row, as an `R×1` column. The gradient at a zero row is zero.
    pub fn row_l2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| crate::tensor::l2_norm(x.row(i))).collect();
        let value = Matrix::from_vec(x.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::RowL2(a), rg)
    }

    /// Sum of each row, as an `R×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        let value = Matrix::from_vec(x.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            value.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::vstack(&mats);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row `i` of the output is row `index[i]` of `a`; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(index.len(), x.cols());
        for (o, &src) in index.iter().enumerate() {
            value.row_mut(o).copy_from_slice(x.row(src));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows { x: a, index }, rg)
    }

    /// `out[r] = a[r, cols[r]]`, as an `R×1` column.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(cols.len(), x.rows(), "pick needs one column per row");
        let data = cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let value = Matrix::from_vec(x.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::Pick { x: a, cols }, rg)
    }

    /// Inverted dropout. Identity when `rng` is `None` or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Var {
        match rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = self.shape(a);
                let keep = 1.0 - rate;
                let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                self.mul_const(a, Matrix::from_vec(r, c, mask))
            }
            _ => a,
        }
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    ///
    /// `q` holds `S` query sequences of `q_len` rows, `k`/`v` hold the matching
    /// `S` key/value sequences of `kv_len` rows. All three are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_len: usize, kv_len: usize) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        assert_eq!(self.shape(v), (kr, kd), "attention: k and v shapes differ");
        assert_eq!(kd, d, "attention: feature width mismatch");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
        assert!(q_len > 0 && kv_len > 0 && qr % q_len == 0 && kr % kv_len == 0, "attention: ragged sequences");
        let segs = qr / q_len;
        assert_eq!(segs, kr / kv_len, "attention: sequence count mismatch");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kvv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = Matrix::zeros(qr, d);
        let block = q_len * kv_len;
        let mut probs = vec![0.0; segs * heads * block];
        for s in 0..segs {
            for h in 0..heads {
                let qo = s * q_len * d + h * dh;
                let ko = s * kv_len * d + h * dh;
                let po = (s * heads + h) * block;
                let p = &mut probs[po..po + block];
                gemm(
                    q_len,
                    dh,
                    kv_len,
                    scale,
                    MatRef::row_major(&qv[qo..], d),
                    MatRef::transposed(&kvv[ko..], d),
                    0.0,
                    p,
                    kv_len,
                );
                for row in p.chunks_mut(kv_len) {
                    softmax_in_place(row);
                }
                gemm(
                    q_len,
                    kv_len,
                    dh,
                    1.0,
                    MatRef::row_major(p, kv_len),
                    MatRef::row_major(&vv[ko..], d),
                    0.0,
                    &mut out.data_mut()[qo..],
                    d,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, q_len, kv_len, probs }, rg)
    }

    /// Reverse pass from a scalar (`1×1`) output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, dy.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, matmul_tn(self.value(*a), dy));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = dy b, db = dyᵀ a
                if self.rg(*a) {
                    self.acc(grads, *a, dy.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, matmul_tn(dy, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, dy);
                self.acc_ref(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.acc_ref(grads, *a, dy);
                if self.rg(*b) {
                    self.acc(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, dy.zip_map(self.value(*b), |g, x| g * x));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::MulConst(a, c) => self.acc(grads, *a, dy.zip_map(c, |g, x| g * x)),
            Op::AddRow(a, row) => {
                self.acc_ref(grads, *a, dy);
                if self.rg(*row) {
                    self.acc(grads, *row, column_sums(dy));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    let mut da = dy.clone();
                    for i in 0..da.rows() {
                        for (g, r) in da.row_mut(i).iter_mut().zip(rv.data()) {
                            *g *= r;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.rg(*row) {
                    let prod = dy.zip_map(self.value(*a), |g, x| g * x);
                    self.acc(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, dy.map(|g| g * s)),
            Op::AddScalar(a) => self.acc_ref(grads, *a, dy),
            Op::Gelu(a) => {
                let dx = dy.zip_map(self.value(*a), |g, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.acc(grads, *a, dx);
            }
            Op::Relu(a) => {
                let dx = dy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, dx);
            }
            Op::Abs(a) => {
                let dx = dy.zip_map(self.value(*a), |g, x| g * x.signum() * f64::from(x != 0.0));
                self.acc(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for ((o, p), g) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (g - inner);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let total: f64 = gr.iter().sum();
                    for ((o, ly), g) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = g - ly.exp() * total;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (xh, gr) = (y.row(i), dy.row(i));
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(xh).map(|(g, h)| g * h).sum();
                    let inv = inv_std[i];
                    for ((o, g), h) in dx.row_mut(i).iter_mut().zip(gr).zip(xh) {
                        *o = inv / c * (c * g - sum_g - h * sum_gx);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RowNormalize { x, norms } => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let n = norms[i];
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), g) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (g - yv * inner) / n;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RowL2(a) => {
                let xv = self.value(*a);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let n = y.get(i, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let g = dy.get(i, 0);
                    for (o, v) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                        *o = g * v / n;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    let g = dy.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|o| *o = g);
                }
                self.acc(grads, *a, dx);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Matrix::filled(r, c, dy.get(0, 0)));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.rg(*p) {
                        let mut dx = Matrix::zeros(r, c);
                        for i in 0..r {
                            dx.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                        }
                        self.acc(grads, *p, dx);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.rg(*p) {
                        let data = dy.data()[off * c..(off + r) * c].to_vec();
                        self.acc(grads, *p, Matrix::from_vec(r, c, data));
                    }
                    off += r;
                }
            }
            Op::GatherRows { x, index } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (o, &src) in index.iter().enumerate() {
                    for (d, g) in dx.row_mut(src).iter_mut().zip(dy.row(o)) {
                        *d += g;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Pick { x, cols } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (i, &col) in cols.iter().enumerate() {
                    dx.set(i, col, dy.get(i, 0));
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, q_len, kv_len, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, *q_len, *kv_len, probs, dy);
                if self.rg(*q) {
                    self.acc(grads, *q, dq);
                }
                if self.rg(*k) {
                    self.acc(grads, *k, dk);
                }
                if self.rg(*v) {
                    self.acc(grads, *v, dv);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_len: usize,
        kv_len: usize,
        probs: &[f64],
        dy: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qr, d) = self.shape(q);
        let kr = self.shape(k).0;
        let segs = qr / q_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kvv, vv, g) = (self.value(q).data(), self.value(k).data(), self.value(v).data(), dy.data());
        let mut dq = Matrix::zeros(qr, d);
        let mut dk = Matrix::zeros(kr, d);
        let mut dv = Matrix::zeros(kr, d);
        let block = q_len * kv_len;
        let mut dp = vec![0.0; block];
        for s in 0..segs {
            for h in 0..heads {
                let qo = s * q_len * d + h * dh;
                let ko = s * kv_len * d + h * dh;
                let po = (s * heads + h) * block;
                let p = &probs[po..po + block];
                // dV = Pᵀ dO
                gemm(
                    kv_len,
                    q_len,
                    dh,
                    1.0,
                    MatRef::transposed(p, kv_len),
                    MatRef::row_major(&g[qo..], d),
                    0.0,
                    &mut dv.data_mut()[ko..],
                    d,
                );
                // dP = dO Vᵀ
                gemm(
                    q_len,
                    dh,
                    kv_len,
                    1.0,
                    MatRef::row_major(&g[qo..], d),
                    MatRef::transposed(&vv[ko..], d),
                    0.0,
                    &mut dp,
                    kv_len,
                );
                for (dpr, pr) in dp.chunks_mut(kv_len).zip(p.chunks(kv_len)) {
                    let inner: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, pv) in dpr.iter_mut().zip(pr) {
                        *x = pv * (*x - inner) * scale;
                    }
                }
                gemm(
                    q_len,
                    kv_len,
                    dh,
                    1.0,
                    MatRef::row_major(&dp, kv_len),
                    MatRef::row_major(&kvv[ko..], d),
                    0.0,
                    &mut dq.data_mut()[qo..],
                    d,
                );
                gemm(
                    kv_len,
                    q_len,
                    dh,
                    1.0,
                    MatRef::transposed(&dp, kv_len),
                    MatRef::row_major(&qv[qo..], d),
                    0.0,
                    &mut dk.data_mut()[ko..],
                    d,
                );
            }
        }
        (dq, dk, dv)
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every tracked parameter of `graph`; untouched parameters get zeros.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Matrix)> {
        graph
            .tracked_params()
            .into_iter()
            .map(|(p, v)| {
                let g = self.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = graph.shape(v);
                    Matrix::zeros(r, c)
                });
                (p, g)
            })
            .collect()
    }
}

fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "matmul_tn row mismatch");
    let mut out = Matrix::zeros(a.cols(), b.cols());
    gemm(
        a.cols(),
        a.rows(),
        b.cols(),
        1.0,
        MatRef::transposed(a.data(), a.cols()),
        MatRef::row_major(b.data(), b.cols()),
        0.0,
        out.data_mut(),
        b.cols(),
    );
    out
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one input matrix.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.variable(m.clone());
            let out = build(&mut g, v);
            g.value(out).get(0, 0)
        };
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let out = build(&mut g, v);
        let analytic = g.backward(out).get(v).cloned().unwrap();
        let numeric = numeric_grad(&x, &eval);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch: {err}\n{analytic:?}\n{numeric:?}");
    }

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let w = rand_m(4, 3, 9);
        check(rand_m(5, 4, 1), |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let y = g.gelu(y);
            let y = g.layer_norm(y);
            let y = g.softmax_rows(y);
            let y = g.sum_cols(y);
            let y = g.mul(y, y);
            g.sum(y)
        });
        check(rand_m(3, 4, 2), |g, x| {
            let y = g.row_normalize(x);
            let t = g.matmul_nt(y, y);
            let t = g.log_softmax_rows(t);
            let p = g.pick(t, vec![0, 2, 1]);
            g.mean(p)
        });
        check(rand_m(4, 3, 3), |g, x| {
            let n = g.row_l2(x);
            let s = g.slice_cols(x, 1, 2);
            let c = g.concat_cols(&[s, n]);
            let r = g.concat_rows(&[c, c]);
            let gat = g.gather_rows(r, vec![0, 0, 7, 3]);
            let a = g.abs(gat);
            g.sum(a)
        });
    }

    #[test]
    fn broadcast_grads() {
        let row = rand_m(1, 3, 5);
        check(rand_m(4, 3, 4), |g, x| {
            let r = g.variable(row.clone());
            let y = g.mul_row(x, r);
            let y = g.add_row(y, r);
            let y = g.scale(y, 0.7);
            let y = g.add_scalar(y, 0.1);
            let y = g.mul(y, y);
            g.sum(y)
        });
        // gradient w.r.t. the broadcast row itself
        let x = rand_m(4, 3, 6);
        check(row, |g, r| {
            let xv = g.constant(x.clone());
            let y = g.mul_row(xv, r);
            let y = g.add_row(y, r);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }

    #[test]
    fn attention_grads_all_inputs() {
        let (segs, q_len, kv_len, d, heads) = (2, 3, 4, 6, 2);
        let k = rand_m(segs * kv_len, d, 11);
        let v = rand_m(segs * kv_len, d, 12);
        let q = rand_m(segs * q_len, d, 13);
        let probe = rand_m(segs * q_len, d, 14);
        let (k2, v2, probe2) = (k.clone(), v.clone(), probe.clone());
        check(q.clone(), move |g, qv| {
            let kk = g.constant(k2.clone());
            let vv = g.constant(v2.clone());
            let o = g.attention(qv, kk, vv, heads, q_len, kv_len);
            let p = g.constant(probe2.clone());
            let o = g.mul(o, p);
            g.sum(o)
        });
        let (q3, v3, probe3) = (q.clone(), v.clone(), probe.clone());
        check(k.clone(), move |g, kk| {
            let qv = g.constant(q3.clone());
            let vv = g.constant(v3.clone());
            let o = g.attention(qv, kk, vv, heads, q_len, kv_len);
            let p = g.constant(probe3.clone());
            let o = g.mul(o, p);
            g.sum(o)
        });
        check(v, move |g, vv| {
            let qv = g.constant(q.clone());
            let kk = g.constant(k.clone());
            let o = g.attention(qv, kk, vv, heads, q_len, kv_len);
            let p = g.constant(probe.clone());
            let o = g.mul(o, p);
            g.sum(o)
        });
    }

    #[test]
    fn attention_matches_naive_single_head() {
        let q = rand_m(2, 4, 21);
        let k = rand_m(3, 4, 22);
        let v = rand_m(3, 4, 23);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = g.attention(qv, kv, vv, 1, 2, 3);
        let scores = q.matmul_nt(&k).map(|x| x / 2.0);
        let expected = softmax_rows(&scores).matmul(&v);
        assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(2, 2, 1.0));
        let x = g.variable(Matrix::filled(2, 2, 2.0));
        let y = g.mul(c, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }
}
