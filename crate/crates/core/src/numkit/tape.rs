//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Because nodes
//! can only reference earlier nodes, tape order is a topological order and
//! `backward` is a single reverse sweep that visits each recorded op once.

use super::params::{Bound, ParamStore};
use super::tensor::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Gelu,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Silu => x * sigmoid(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ExpandRow(Var),
    ExpandCol(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Unary(Var, Unary),
    Conv1d { x: Var, w: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, seg: Vec<usize>, nseg: usize },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recording of a forward computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of a bound store; zeros where a parameter
    /// did not influence the loss.
    pub fn params(&self, bound: &Bound, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        bound
            .vars()
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| self.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape that records values only; nothing is differentiable.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `len`. Vars past the mark become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.grad_enabled && inputs.iter().any(|&v| self.is_tracked(v));
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (when gradients are enabled).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let tracked = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        Bound::new(store.tensors().iter().map(|t| self.leaf(t.clone())).collect())
    }

    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> Bound {
        Bound::new(store.tensors().iter().map(|t| self.constant(t.clone())).collect())
    }

    /// Value-copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(dim_err(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Repeat a length-`n` vector as every row of a `[rows×n]` matrix.
    pub fn expand_row(&mut self, v: Var, rows: usize) -> Var {
        let src = self.value(v).data();
        let n = src.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(&[rows, n], out).expect("expand_row shape");
        self.push(value, Op::ExpandRow(v), &[v])
    }

    /// Repeat a length-`m` vector as every column of a `[m×cols]` matrix.
    pub fn expand_col(&mut self, v: Var, cols: usize) -> Var {
        let src = self.value(v).data();
        let m = src.len();
        let mut out = Vec::with_capacity(m * cols);
        for &x in src {
            out.extend(std::iter::repeat_n(x, cols));
        }
        let value = Tensor::new(&[m, cols], out).expect("expand_col shape");
        self.push(value, Op::ExpandCol(v), &[v])
    }

    /// Column sums: `[m×n] -> [1×n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += d[i * n + j];
            }
        }
        let value = Tensor::new(&[1, n], out).expect("sum_rows shape");
        self.push(value, Op::SumRows(a), &[a])
    }

    /// Row sums: `[m×n] -> [m×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let d = self.value(a).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        let value = Tensor::new(&[m, 1], out).expect("sum_cols shape");
        self.push(value, Op::SumCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, _) = self.dims(a);
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m as f64)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut z = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o / z;
            }
        }
        let value = Tensor::new(&[m, n], out).expect("softmax shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Normalise each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        let mut rstds = Vec::with_capacity(m);
        let nf = T::c(n as f64);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + T::c(eps)).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(&[m, n], out).expect("layer_norm shape");
        self.push(value, Op::LayerNorm { x, rstd: rstds }, &[x])
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).map(|x| T::c(f.apply(x.f())));
        self.push(value, Op::Unary(a, f), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Same-padded 1-D cross-correlation along time.
    ///
    /// `x` is `[C_in×T]`, `w` is `[C_out×C_in×K]` with odd `K`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (cin, t) = self.dims(x);
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(dim_err(format!("conv1d kernel {ws:?} does not fit input [{cin}x{t}]")));
        }
        let (cout, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {k}")));
        }
        let pad = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); cout * t];
        for o in 0..cout {
            let orow = &mut out[o * t..(o + 1) * t];
            for c in 0..cin {
                let xrow = &xd[c * t..(c + 1) * t];
                for kk in 0..k {
                    let wv = wd[(o * cin + c) * k + kk];
                    // out[tt] += w * x[tt + kk - pad]
                    let lo = pad.saturating_sub(kk);
                    let hi = (t + pad).saturating_sub(kk).min(t);
                    for tt in lo..hi {
                        orow[tt] += wv * xrow[tt + kk - pad];
                    }
                }
            }
        }
        let value = Tensor::new(&[cout, t], out)?;
        Ok(self.push(value, Op::Conv1d { x, w }, &[x, w]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(dim_err(format!("concat_cols row counts differ: {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(&[m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(dim_err(format!("concat_rows column counts differ: {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(dim_err(format!("slice_cols {start}+{len} out of {n}")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m || len == 0 {
            return Err(dim_err(format!("slice_rows {start}+{len} out of {m}")));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(&[len, n], out)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// `out[e] = x[idx[e]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.is_empty() {
            return Err(dim_err("gather_rows with no indices".into()));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(dim_err(format!("gather_rows index {i} out of {m}")));
            }
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[idx.len(), n], out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[idx[e]] += x[e]` into `rows` output rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (e, n) = self.dims(x);
        if idx.len() != e {
            return Err(dim_err(format!("scatter_add_rows: {} indices for {e} rows", idx.len())));
        }
        let d = self.value(x).data();
        let mut out = vec![T::zero(); rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(dim_err(format!("scatter_add_rows index {i} out of {rows}")));
            }
            for j in 0..n {
                out[i * n + j] += d[r * n + j];
            }
        }
        let value = Tensor::new(&[rows, n], out)?;
        Ok(self.push(value, Op::ScatterAddRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Softmax over the entries of `x` (flattened) that share a segment id.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        let d = self.value(x).data();
        if seg.len() != d.len() {
            return Err(dim_err(format!("segment_softmax: {} ids for {} values", seg.len(), d.len())));
        }
        let mut mx = vec![T::neg_infinity(); nseg];
        for (&v, &s) in d.iter().zip(seg) {
            if s >= nseg {
                return Err(dim_err(format!("segment id {s} out of {nseg}")));
            }
            mx[s] = mx[s].max(v);
        }
        let mut z = vec![T::zero(); nseg];
        let mut out: Vec<T> = d.iter().zip(seg).map(|(&v, &s)| (v - mx[s]).exp()).collect();
        for (&e, &s) in out.iter().zip(seg) {
            z[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(seg) {
            *o = *o / z[s];
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::SegmentSoftmax { x, seg: seg.to_vec(), nseg }, &[x]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                // Gradients keep the shape of the value they belong to.
                let g = if g.shape() == self.shape(v) {
                    g
                } else {
                    g.reshape(self.shape(v)).expect("gradient shape")
                };
                *slot = Some(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.is_tracked(*a) {
                    // dA = G · Bᵀ
                    let bt = self.value(*b).transpose();
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gd, bt.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.is_tracked(*b) {
                    // dB = Aᵀ · G
                    let at = self.value(*a).transpose();
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(at.data(), gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.is_tracked(*b) {
                    let num = g.zip_map(av, |x, y| x * y);
                    self.accumulate(grads, *b, num.zip_map(bv, |x, y| -x / (y * y)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::ExpandRow(v) => {
                let (rows, n) = g.dims2();
                let mut out = vec![T::zero(); n];
                for r in 0..rows {
                    for j in 0..n {
                        out[j] += gd[r * n + j];
                    }
                }
                self.accumulate(grads, *v, Tensor::new(self.shape(*v), out).unwrap());
            }
            Op::ExpandCol(v) => {
                let (m, cols) = g.dims2();
                let out = (0..m).map(|r| gd[r * cols..(r + 1) * cols].iter().copied().sum()).collect();
                self.accumulate(grads, *v, Tensor::new(self.shape(*v), out).unwrap());
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a);
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(gd);
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), out).unwrap());
            }
            Op::SumCols(a) => {
                let (m, n) = self.dims(*a);
                let mut out = Vec::with_capacity(m * n);
                for &x in gd.iter().take(m) {
                    out.extend(std::iter::repeat_n(x, n));
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), out).unwrap());
            }
            Op::SumAll(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                self.accumulate(grads, *a, t);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (m, n) = node.value.dims2();
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    let dot: T = (0..n).map(|j| gd[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        out[r * n + j] = y[r * n + j] * (gd[r * n + j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), out).unwrap());
            }
            Op::LayerNorm { x, rstd } => {
                let xhat = node.value.data();
                let (m, n) = node.value.dims2();
                let nf = T::c(n as f64);
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    let gr = &gd[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[r * n + j] = rstd[r] / nf * (nf * gr[j] - sg - xr[j] * sgx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), out).unwrap());
            }
            Op::Unary(a, f) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let out = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gg, (&x, &y))| gg * T::c(f.derivative(x.f(), y.f())))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), out).unwrap());
            }
            Op::Conv1d { x, w } => {
                let (cin, t) = self.dims(*x);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let pad = k / 2;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut dx = vec![T::zero(); cin * t];
                let mut dw = vec![T::zero(); cout * cin * k];
                for o in 0..cout {
                    let grow = &gd[o * t..(o + 1) * t];
                    for c in 0..cin {
                        let xrow = &xd[c * t..(c + 1) * t];
                        for kk in 0..k {
                            let widx = (o * cin + c) * k + kk;
                            let wv = wd[widx];
                            let lo = pad.saturating_sub(kk);
                            let hi = (t + pad).saturating_sub(kk).min(t);
                            let mut acc = T::zero();
                            for tt in lo..hi {
                                let src = tt + kk - pad;
                                acc += grow[tt] * xrow[src];
                                dx[c * t + src] += grow[tt] * wv;
                            }
                            dw[widx] += acc;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[cin, t], dx).unwrap());
                self.accumulate(grads, *w, Tensor::new(ws, dw).unwrap());
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let mut out = Vec::with_capacity(m * c);
                    for r in 0..m {
                        out.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    off += c;
                    self.accumulate(grads, p, Tensor::new(self.shape(p), out).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let out = gd[off..off + len].to_vec();
                    off += len;
                    self.accumulate(grads, p, Tensor::new(self.shape(p), out).unwrap());
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = g.dims2().1;
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    out[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), out).unwrap());
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.dims(*x);
                let mut out = vec![T::zero(); m * n];
                out[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), out).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = self.dims(*x);
                let mut out = vec![T::zero(); m * n];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        out[src * n + j] += gd[r * n + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), out).unwrap());
            }
            Op::ScatterAddRows { x, idx } => {
                let n = g.dims2().1;
                let mut out = Vec::with_capacity(idx.len() * n);
                for &dst in idx {
                    out.extend_from_slice(&gd[dst * n..(dst + 1) * n]);
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), out).unwrap());
            }
            Op::SegmentSoftmax { x, seg, nseg } => {
                let y = node.value.data();
                let mut dot = vec![T::zero(); *nseg];
                for ((&gg, &yy), &s) in gd.iter().zip(y).zip(seg) {
                    dot[s] += gg * yy;
                }
                let out = gd
                    .iter()
                    .zip(y)
                    .zip(seg)
                    .map(|((&gg, &yy), &s)| yy * (gg - dot[s]))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), out).unwrap());
            }
        }
    }
}
