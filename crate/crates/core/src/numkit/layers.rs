//! Layers built on the tape primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Unary, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng);
        let b = store.add_zeros(format!("{name}.b"), &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let rows = tape.value(x).dims2().0;
        let xw = tape.matmul(x, p[self.w])?;
        let b = tape.expand_row(p[self.b], rows);
        tape.add(xw, b)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add_ones(format!("{name}.gamma"), &[dim]);
        let beta = store.add_zeros(format!("{name}.beta"), &[dim]);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let rows = tape.value(x).dims2().0;
        let n = tape.layer_norm(x, self.eps);
        let g = tape.expand_row(p[self.gamma], rows);
        let b = tape.expand_row(p[self.beta], rows);
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }
}

/// Same-padded temporal convolution over `[channels×time]` inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {kernel}")));
        }
        let w = store.add_glorot(
            format!("{name}.w"),
            &[c_out, c_in, kernel],
            c_in * kernel,
            c_out * kernel,
            rng,
        );
        let b = store.add_zeros(format!("{name}.b"), &[c_out]);
        Ok(Self { w, b, c_in, c_out, kernel })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let t = tape.value(x).dims2().1;
        let y = tape.conv1d(x, p[self.w])?;
        let b = tape.expand_col(p[self.b], t);
        tape.add(y, b)
    }
}

/// Scaled dot-product self-attention with per-head projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `[S×S]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.out)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<AttentionOutput> {
        let d = tape.value(x).dims2().1;
        if d != self.dim {
            return Err(Error::Config(format!("attention expects width {}, got {d}", self.dim)));
        }
        let dh = self.dim / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s);
            weights.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let out = self.o.forward(tape, p, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Directed edge list for message passing, `src → dst`.
#[derive(Clone, Debug, Default)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    /// Both directions of every undirected pair.
    pub fn undirected(pairs: &[(usize, usize)]) -> Self {
        let mut src = Vec::with_capacity(pairs.len() * 2);
        let mut dst = Vec::with_capacity(pairs.len() * 2);
        for &(a, b) in pairs {
            src.push(a);
            dst.push(b);
            src.push(b);
            dst.push(a);
        }
        Self { src, dst }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Attention message passing where the score depends on both endpoints:
///
/// `e_ij = aᵀ LeakyReLU(W_dst h_i + W_src h_j)`, normalised over the
/// neighbours `j` of `i`, and `h_i' = W_self h_i + Σ_j α_ij W_src h_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphAttention {
    pub w_src: Linear,
    pub w_dst: Linear,
    pub w_self: Linear,
    pub attn: ParamId,
    pub slope: f64,
}

impl GraphAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_src: Linear::new(store, &format!("{name}.src"), fan_in, fan_out, rng),
            w_dst: Linear::new(store, &format!("{name}.dst"), fan_in, fan_out, rng),
            w_self: Linear::new(store, &format!("{name}.self"), fan_in, fan_out, rng),
            attn: store.add_glorot(format!("{name}.attn"), &[fan_out, 1], fan_out, 1, rng),
            slope: 0.2,
        }
    }

    /// Returns the updated node states and, when there are edges, the
    /// per-edge attention coefficients `[E×1]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<(Var, Option<Var>)> {
        let n = tape.value(h).dims2().0;
        let own = self.w_self.forward(tape, p, h)?;
        if edges.is_empty() {
            return Ok((own, None));
        }
        let hs = self.w_src.forward(tape, p, h)?;
        let hd = self.w_dst.forward(tape, p, h)?;
        let src = tape.gather_rows(hs, &edges.src)?;
        let dst = tape.gather_rows(hd, &edges.dst)?;
        let pre = tape.add(src, dst)?;
        let act = tape.unary(pre, Unary::LeakyRelu(self.slope));
        let score = tape.matmul(act, p[self.attn])?;
        let alpha = tape.segment_softmax(score, &edges.dst, n)?;
        let width = tape.value(src).dims2().1;
        let alpha_wide = tape.expand_col(alpha, width);
        let msg = tape.mul(src, alpha_wide)?;
        let agg = tape.scatter_add_rows(msg, &edges.dst, n)?;
        Ok((tape.add(own, agg)?, Some(alpha)))
    }
}
