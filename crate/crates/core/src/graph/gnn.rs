use rand::Rng;
use serde::{Deserialize, Serialize};

use super::build::{AuctionGraph, GraphBatch};
use crate::error::{Error, Result};
use crate::numkit::{Bound, GraphAttention, LayerNorm, Mlp, MultiHeadAttention, ParamStore, Tape, Tensor, Var};

/// Stack of attention message-passing layers with GELU between them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gnn {
    pub layers: Vec<GraphAttention>,
    pub in_dim: usize,
    pub dim: usize,
}

impl Gnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        in_dim: usize,
        dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 || dim == 0 {
            return Err(Error::Config("graph encoder needs at least one layer and a positive width".into()));
        }
        let layers = (0..layers)
            .map(|l| GraphAttention::new(store, &format!("{name}.gat{l}"), if l == 0 { in_dim } else { dim }, dim, rng))
            .collect();
        Ok(Self { layers, in_dim, dim })
    }

    /// Node states after every layer for a batch of graphs.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &GraphBatch) -> Result<Var> {
        let width = batch.features.shape()[1];
        if batch.n_nodes > 0 && width != self.in_dim {
            return Err(Error::Config(format!("graph features have width {width}, encoder expects {}", self.in_dim)));
        }
        let mut h = tape.constant(batch.features.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h, &batch.edges)?.0;
            if l + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// `x^i = h(VE_i) + h(VN_i)` for every graph, graph-major `[Σn × d]`.
    pub fn agent_embeddings(&self, tape: &mut Tape<f32>, h: Var, batch: &GraphBatch) -> Result<Var> {
        let ve: Vec<usize> = (0..batch.offsets.len()).flat_map(|g| batch.ve_rows(g)).collect();
        let vn: Vec<usize> = (0..batch.offsets.len()).flat_map(|g| batch.vn_rows(g)).collect();
        let a = tape.gather_rows(h, &ve)?;
        let b = tape.gather_rows(h, &vn)?;
        tape.add(a, b)
    }
}

/// One transformer encoder block over the agent set followed by mean pooling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EcBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
}

impl EcBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, 2 * dim, dim], rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        })
    }

    /// Encoder block output `[S×d]` for agent tokens `x: [S×d]`.
    pub fn encode(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let a = self.attn.forward(tape, p, x)?;
        let r = tape.add(x, a)?;
        let y = self.ln1.forward(tape, p, r)?;
        let f = self.ff.forward(tape, p, y)?;
        let r = tape.add(y, f)?;
        self.ln2.forward(tape, p, r)
    }

    /// Joint embedding `[1×d]`.
    pub fn aggregate(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let z = self.encode(tape, p, x)?;
        Ok(tape.mean_rows(z))
    }
}

/// Untracked per-agent embeddings of a single graph.
pub fn encode(graph: &AuctionGraph, gnn: &Gnn, store: &ParamStore<f32>) -> Result<Vec<Vec<f32>>> {
    let mut tape = Tape::inference();
    let p = tape.bind_frozen(store);
    let batch = GraphBatch::new(std::slice::from_ref(graph));
    let h = gnn.forward(&mut tape, &p, &batch)?;
    let x = gnn.agent_embeddings(&mut tape, h, &batch)?;
    let v = tape.value(x);
    let d = v.shape()[1];
    Ok(v.data().chunks(d).map(|r| r.to_vec()).collect())
}

/// Untracked joint embedding of a set of agent embeddings.
pub fn ec_aggregate(embeddings: &[Vec<f32>], block: &EcBlock, store: &ParamStore<f32>) -> Result<Vec<f32>> {
    if embeddings.is_empty() {
        return Err(Error::Input("joint embedding needs at least one agent".into()));
    }
    let d = embeddings[0].len();
    let data: Vec<f32> = embeddings.iter().flatten().copied().collect();
    let mut tape = Tape::inference();
    let p = tape.bind_frozen(store);
    let x = tape.constant(Tensor::new(&[embeddings.len(), d], data)?);
    let z = block.aggregate(&mut tape, &p, x)?;
    Ok(tape.value(z).data().to_vec())
}
