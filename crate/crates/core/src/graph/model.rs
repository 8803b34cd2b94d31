use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::build::{build_graph, graph_seed, AuctionGraph, FeatureSpec, GraphBatch};
use super::gnn::{EcBlock, Gnn};
use crate::auction::{AuctionConfig, EpisodeRecord};
use crate::error::{Error, Result};
use crate::numkit::{Bound, Checkpoint, Dtype, Mlp, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub d: usize,
    pub layers: usize,
    pub cap_m: usize,
    pub heads: usize,
    pub ec: bool,
    pub spl: bool,
    pub spl_weight: f64,
    pub ema_decay: f64,
    /// Value-quantile bins for the per-bin bid/value ratio features.
    pub bins: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { d: 64, layers: 2, cap_m: 64, heads: 4, ec: false, spl: false, spl_weight: 0.1, ema_decay: 0.99, bins: 4 }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.bins == 0 {
            return Err(Error::Config("graph d, layers and bins must be at least 1".into()));
        }
        if self.ec && (self.heads == 0 || !self.d.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!("graph d={} not divisible by heads={}", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Embeddings of every step of one episode, including the terminal state.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeEmbedding {
    pub steps: usize,
    pub agents: usize,
    pub dim: usize,
    /// `[steps × agents × dim]`, row-major.
    pub x: Vec<f32>,
    /// `[steps × dim]` when EC is on.
    pub joint: Option<Vec<f32>>,
}

impl EpisodeEmbedding {
    pub fn agent(&self, t: usize, i: usize) -> &[f32] {
        let o = (t * self.agents + i) * self.dim;
        &self.x[o..o + self.dim]
    }

    /// `[steps × dim]` sequence of one agent.
    pub fn agent_sequence(&self, i: usize) -> Vec<f32> {
        (0..self.steps).flat_map(|t| self.agent(t, i).iter().copied()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new(Dtype::F32);
        c.set_meta("kind", "embeddings");
        c.insert("agents", Tensor::new(&[self.steps, self.agents, self.dim], self.x.iter().map(|&v| v as f64).collect())?);
        if let Some(j) = &self.joint {
            c.insert("joint", Tensor::new(&[self.steps, self.dim], j.iter().map(|&v| v as f64).collect())?);
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        let a = c.require("agents")?;
        if a.shape().len() != 3 {
            return Err(Error::Checkpoint("agent embeddings must be rank 3".into()));
        }
        Ok(Self {
            steps: a.shape()[0],
            agents: a.shape()[1],
            dim: a.shape()[2],
            x: a.data().iter().map(|&v| v as f32).collect(),
            joint: c.get("joint").map(|j| j.data().iter().map(|&v| v as f32).collect()),
        })
    }
}

/// Node states, agent embeddings and optional joint embeddings of a batch.
pub struct EmbedOut {
    pub nodes: Var,
    pub agents: Var,
    pub joint: Option<Var>,
}

/// Graph encoder with optional joint aggregation and self-predictive head.
#[derive(Clone, Debug)]
pub struct GraphModel {
    pub config: GraphConfig,
    pub spec: FeatureSpec,
    pub gnn: Gnn,
    pub ec: Option<EcBlock>,
    pub predictor: Option<Mlp>,
    pub store: ParamStore<f32>,
    /// Slow-moving copy used for self-predictive targets.
    pub target: Option<ParamStore<f32>>,
    pub spl_warnings: u64,
}

impl GraphModel {
    pub fn new(config: &GraphConfig, auction: &AuctionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = FeatureSpec::new(auction, config.bins);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gnn = Gnn::new(&mut store, "gnn", spec.node_dim(), config.d, config.layers, &mut rng)?;
        let ec = if config.ec { Some(EcBlock::new(&mut store, "ec", config.d, config.heads, &mut rng)?) } else { None };
        let predictor = if config.spl {
            Some(Mlp::new(&mut store, "spl", &[2 * config.d, config.d, config.d], &mut rng))
        } else {
            None
        };
        let target = config.spl.then(|| store.clone());
        Ok(Self { config: config.clone(), spec, gnn, ec, predictor, store, target, spl_warnings: 0 })
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn episode_graphs(&self, episode: &EpisodeRecord) -> Result<Vec<AuctionGraph>> {
        Ok(episode
            .views()?
            .iter()
            .map(|v| build_graph(v, &self.spec, self.config.cap_m, graph_seed(episode.seed, v.t)))
            .collect())
    }

    pub fn embed(&self, tape: &mut Tape<f32>, p: &Bound, batch: &GraphBatch) -> Result<EmbedOut> {
        let nodes = self.gnn.forward(tape, p, batch)?;
        let agents = self.gnn.agent_embeddings(tape, nodes, batch)?;
        let joint = match &self.ec {
            Some(block) => {
                let mut rows = Vec::with_capacity(batch.offsets.len());
                let mut start = 0;
                for &n in &batch.n_agents {
                    let x = tape.slice_rows(agents, start, n)?;
                    rows.push(block.aggregate(tape, p, x)?);
                    start += n;
                }
                Some(tape.concat_rows(&rows)?)
            }
            None => None,
        };
        Ok(EmbedOut { nodes, agents, joint })
    }

    /// Untracked embeddings of a whole episode.
    pub fn embed_episode(&self, episode: &EpisodeRecord) -> Result<EpisodeEmbedding> {
        self.embed_graphs(&self.episode_graphs(episode)?)
    }

    pub fn embed_graphs(&self, graphs: &[AuctionGraph]) -> Result<EpisodeEmbedding> {
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let batch = GraphBatch::new(graphs);
        let out = self.embed(&mut tape, &p, &batch)?;
        Ok(EpisodeEmbedding {
            steps: graphs.len(),
            agents: graphs.first().map_or(0, |g| g.n_agents),
            dim: self.dim(),
            x: tape.value(out.agents).data().to_vec(),
            joint: out.joint.map(|j| tape.value(j).data().to_vec()),
        })
    }

    /// Self-predictive auxiliary loss over consecutive graphs of one episode.
    ///
    /// Predicts the slow target encoder's `x_{t+1}^i` from `x_t^i` and a
    /// summary of the other agents (their mean, or the joint embedding).
    pub fn spl_term(&mut self, tape: &mut Tape<f32>, p: &Bound, out: &EmbedOut, batch: &GraphBatch) -> Result<Option<Var>> {
        let (Some(pred), Some(target)) = (&self.predictor, &self.target) else {
            return Ok(None);
        };
        let steps = batch.offsets.len();
        if steps < 2 {
            return Ok(None);
        }
        let n = batch.n_agents[0];
        if batch.n_agents.iter().any(|&m| m != n) {
            return Err(Error::Input("self-predictive loss needs a fixed agent set".into()));
        }
        let d = self.dim();
        let target_x = {
            let mut t2 = Tape::inference();
            let tp = t2.bind_frozen(target);
            let o = self.embed(&mut t2, &tp, batch)?;
            t2.value(o.agents).clone()
        };
        let rows = (steps - 1) * n;
        let x_now = tape.slice_rows(out.agents, 0, rows)?;
        let others = match out.joint {
            Some(j) => {
                let idx: Vec<usize> = (0..rows).map(|r| r / n).collect();
                tape.gather_rows(j, &idx)?
            }
            None => {
                let mut m = vec![0f32; rows * rows];
                if n > 1 {
                    for r in 0..rows {
                        let g = r / n;
                        for c in g * n..(g + 1) * n {
                            if c != r {
                                m[r * rows + c] = 1.0 / (n - 1) as f32;
                            }
                        }
                    }
                }
                let mv = tape.constant(Tensor::new(&[rows, rows], m)?);
                tape.matmul(mv, x_now)?
            }
        };
        let input = tape.concat_cols(&[x_now, others])?;
        let prediction = pred.forward(tape, p, input)?;
        let tgt = Tensor::new(&[rows, d], target_x.data()[n * d..].to_vec())?;
        let (loss, skipped) = cosine_loss(tape, prediction, &tgt)?;
        self.spl_warnings += skipped as u64;
        Ok(Some(loss))
    }

    /// Move the target encoder towards the online one.
    pub fn update_target(&mut self) {
        if let Some(t) = &mut self.target {
            t.ema_from(&self.store, self.config.ema_decay);
        }
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_meta("graph.config", serde_json::to_string(&self.config)?);
        self.store.write_into("graph", ckpt);
        if let Some(t) = &self.target {
            t.write_into("graph_target", ckpt);
        }
        Ok(())
    }

    pub fn read_from(auction: &AuctionConfig, ckpt: &Checkpoint) -> Result<Self> {
        let cfg: GraphConfig = serde_json::from_str(
            ckpt.meta("graph.config").ok_or_else(|| Error::Checkpoint("missing graph.config".into()))?,
        )?;
        let mut m = Self::new(&cfg, auction, 0)?;
        m.store.load_from("graph", ckpt)?;
        if let Some(t) = &mut m.target {
            t.load_from("graph_target", ckpt)?;
        }
        Ok(m)
    }
}

/// Negative mean cosine similarity between prediction rows and constant
/// target rows. Rows where either vector has zero norm contribute 0 and are
/// counted in the returned skip count.
pub fn cosine_loss(tape: &mut Tape<f32>, pred: Var, target: &Tensor<f32>) -> Result<(Var, usize)> {
    let (m, d) = tape.value(pred).dims2();
    if target.shape() != [m, d] {
        return Err(Error::Input(format!("cosine target shape {:?} vs prediction [{m}, {d}]", target.shape())));
    }
    let pv = tape.value(pred).data().to_vec();
    let mut keep = Vec::new();
    let mut unit = Vec::new();
    for r in 0..m {
        let t = &target.data()[r * d..(r + 1) * d];
        let tn = t.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let pn = pv[r * d..(r + 1) * d].iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if tn > 0.0 && pn > 0.0 {
            keep.push(r);
            unit.extend(t.iter().map(|v| (*v as f64 / tn) as f32));
        }
    }
    let skipped = m - keep.len();
    if keep.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), skipped));
    }
    let k = keep.len();
    let p = tape.gather_rows(pred, &keep)?;
    let u = tape.constant(Tensor::new(&[k, d], unit)?);
    let pu = tape.mul(p, u)?;
    let dot = tape.sum_cols(pu);
    let sq = tape.square(p);
    let ss = tape.sum_cols(sq);
    let norm = tape.unary(ss, crate::numkit::Unary::Sqrt);
    let cos = tape.div(dot, norm)?;
    let total = tape.sum_all(cos);
    Ok((tape.scale(total, -1.0 / m as f64), skipped))
}

/// Plain cosine-loss value for two vectors; `None` when either norm is zero.
pub fn spl_loss(pred: &[f64], target: &[f64]) -> Option<f64> {
    let dot: f64 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    let np = pred.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = target.iter().map(|a| a * a).sum::<f64>().sqrt();
    (np > 0.0 && nt > 0.0).then(|| -dot / (np * nt))
}
