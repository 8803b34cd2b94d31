//! Dense tensors, tape-based reverse-mode autodiff, layers and Adam.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Dtype};
pub use gradcheck::{grad_check, grad_check_params};
pub use layers::{Conv1d, EdgeIndex, GraphAttention, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Grads, Tape, Unary, Var};
pub use tensor::{matmul, Real, Tensor};

use crate::error::Result;

/// Untracked same-padded convolution of `[C_in×T]` by `[C_out×C_in×K]`.
pub fn conv1d<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(kernels.clone());
    let y = tape.conv1d(xv, kv)?;
    Ok(tape.value(y).clone())
}

/// Untracked attention forward; returns the output and per-head weights.
pub fn multi_head_attention<T: Real>(
    x: &Tensor<T>,
    layer: &MultiHeadAttention,
    params: &ParamStore<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut tape = Tape::inference();
    let p = tape.bind_frozen(params);
    let xv = tape.constant(x.clone());
    let out = layer.forward_with_weights(&mut tape, &p, xv)?;
    let weights = out.weights.iter().map(|w| tape.value(*w).clone()).collect();
    Ok((tape.value(out.out).clone(), weights))
}
