//! Belief graphs under incomplete information and embedding distillation
//! from the full-information encoder into a student encoder.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{subseed, EpisodeRecord, StepView};
use crate::error::{Error, Result};
use crate::graph::{graph_seed, AuctionGraph, EpisodeEmbedding, FeatureSpec, Gnn, GraphBatch, GraphModel, NodeKind};
use crate::numkit::{adam_step, AdamConfig, AdamState, Checkpoint, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeliefConfig {
    /// Number of pseudo-agent subgraphs.
    pub h: usize,
    pub expose_prob: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_episodes: usize,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        Self { h: 4, expose_prob: 0.5, lr: 1e-3, steps: 500, batch_episodes: 4 }
    }
}

/// Agent-local graph: the agent's own hubs plus `h` pseudo-agent hub pairs.
///
/// Uses the [`AuctionGraph`] layout with `1 + h` agents where agent 0 is the
/// real one.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefGraph {
    pub graph: AuctionGraph,
    pub h: usize,
}

impl BeliefGraph {
    pub fn pseudo_ve(&self, p: usize) -> usize {
        self.graph.ve(1 + p)
    }

    pub fn pseudo_vn(&self, p: usize) -> usize {
        self.graph.vn(1 + p)
    }
}

/// IOs the agent knows of: its exposed IOs and the non-exposed IOs sampled
/// for its own hub, with the same sampling as the full graph.
pub fn own_view(view: &StepView, agent: usize, cap_m: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut ios: Vec<_> = view.live.iter().collect();
    ios.sort_by_key(|io| io.id);
    let exposed: Vec<u64> = ios.iter().filter(|io| io.exposed(agent)).map(|io| io.id).collect();
    let hidden: Vec<u64> = ios.iter().filter(|io| !io.exposed(agent)).map(|io| io.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, agent as u64 + 1));
    let mut chosen: Vec<usize> = sample(&mut rng, hidden.len(), cap_m.min(hidden.len())).into_vec();
    chosen.sort_unstable();
    (exposed, chosen.into_iter().map(|j| hidden[j]).collect())
}

/// Known IOs in id order, each assigned to the VE hub of a pseudo-agent with
/// probability `expose_prob` and to its VN hub otherwise.
pub fn pseudo_partition(known: usize, h: usize, expose_prob: f64, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h).map(|_| (0..known).map(|_| rng.random_bool(expose_prob)).collect()).collect()
}

pub fn build_belief_graph(
    view: &StepView,
    agent: usize,
    spec: &FeatureSpec,
    cap_m: usize,
    h: usize,
    expose_prob: f64,
    seed: u64,
) -> BeliefGraph {
    let (exposed, sampled) = own_view(view, agent, cap_m, seed);
    let mut known: Vec<u64> = exposed.iter().chain(&sampled).copied().collect();
    known.sort_unstable();
    let m = 1 + h;
    let own = spec.agent_features(view, agent);
    let mut features = Vec::with_capacity(2 * m + known.len());
    for kind in [NodeKind::Exposed, NodeKind::NonExposed] {
        features.push(spec.node_row(kind, Some(&own), None));
        for _ in 0..h {
            features.push(spec.node_row(kind, None, None));
        }
    }
    // Own hubs occupy VE_0 = 0 and VN_0 = m; reorder to match the layout.
    let mut ordered = Vec::with_capacity(2 * m);
    ordered.push(features[0].clone());
    ordered.extend(features[1..m].iter().cloned());
    ordered.push(features[m].clone());
    ordered.extend(features[m + 1..2 * m].iter().cloned());
    let mut features = ordered;
    for id in &known {
        let io = view.live.iter().find(|io| io.id == *id).expect("known IO is live");
        let x = spec.own_view_io_features(io, agent, view.t, view.horizon, view.max_slots);
        features.push(spec.node_row(NodeKind::Io, None, Some(&x)));
    }
    let mut edges = Vec::new();
    for (k, id) in known.iter().enumerate() {
        let node = 2 * m + k;
        if exposed.binary_search(id).is_ok() {
            edges.push((0, node));
        } else {
            edges.push((m, node));
        }
    }
    let part = pseudo_partition(known.len(), h, expose_prob, subseed(seed, 0xBE11EF + agent as u64));
    for (p, roles) in part.iter().enumerate() {
        for (k, &to_ve) in roles.iter().enumerate() {
            let hub = if to_ve { 1 + p } else { m + 1 + p };
            edges.push((hub, 2 * m + k));
        }
    }
    BeliefGraph { graph: AuctionGraph { n_agents: m, io_ids: known, features, edges }, h }
}

/// Mean squared difference over all elements; `teacher` is a constant.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, student: Var, teacher: &Tensor<T>) -> Result<Var> {
    if tape.shape(student) != teacher.shape() {
        return Err(Error::Input(format!(
            "student shape {:?} differs from teacher {:?}",
            tape.shape(student),
            teacher.shape()
        )));
    }
    let t = tape.constant(teacher.clone());
    let d = tape.sub(student, t)?;
    let sq = tape.square(d);
    Ok(tape.mean_all(sq))
}

/// Student encoder operating on belief graphs.
#[derive(Clone, Debug)]
pub struct Student {
    pub gnn: Gnn,
    pub store: ParamStore<f32>,
    pub config: BeliefConfig,
}

/// Belief graphs of one episode, `(t, agent)`-major, with teacher targets.
pub struct StudentData {
    pub batch: GraphBatch,
    pub steps: usize,
    pub agents: usize,
    pub hubs: usize,
    /// Teacher embeddings `[steps·agents × d]`.
    pub teacher: Vec<f32>,
    pub teacher_joint: Option<Vec<f32>>,
}

impl Student {
    pub fn new(teacher: &GraphModel, config: &BeliefConfig, seed: u64) -> Result<Self> {
        if config.h == 0 {
            return Err(Error::Config("belief graphs need h >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gnn = Gnn::new(&mut store, "student", teacher.spec.node_dim(), teacher.dim(), teacher.config.layers, &mut rng)?;
        Ok(Self { gnn, store, config: config.clone() })
    }

    pub fn episode_graphs(&self, teacher: &GraphModel, episode: &EpisodeRecord) -> Result<Vec<AuctionGraph>> {
        let mut out = Vec::new();
        for v in episode.views()? {
            let seed = graph_seed(episode.seed, v.t);
            for agent in 0..episode.n_agents() {
                out.push(
                    build_belief_graph(&v, agent, &teacher.spec, teacher.config.cap_m, self.config.h, self.config.expose_prob, seed)
                        .graph,
                );
            }
        }
        Ok(out)
    }

    pub fn prepare(&self, teacher: &GraphModel, episode: &EpisodeRecord) -> Result<StudentData> {
        let graphs = self.episode_graphs(teacher, episode)?;
        let emb = teacher.embed_episode(episode)?;
        Ok(StudentData {
            batch: GraphBatch::new(&graphs),
            steps: emb.steps,
            agents: emb.agents,
            hubs: 1 + self.config.h,
            teacher: emb.x,
            teacher_joint: emb.joint,
        })
    }

    /// Own-agent rows `[graphs × d]` of a belief batch.
    fn own_rows(&self, tape: &mut Tape<f32>, p: &crate::numkit::Bound, batch: &GraphBatch) -> Result<Var> {
        let h = self.gnn.forward(tape, p, batch)?;
        let ve: Vec<usize> = (0..batch.offsets.len()).map(|g| batch.offsets[g]).collect();
        let vn: Vec<usize> = (0..batch.offsets.len()).map(|g| batch.offsets[g] + batch.n_agents[g]).collect();
        let a = tape.gather_rows(h, &ve)?;
        let b = tape.gather_rows(h, &vn)?;
        tape.add(a, b)
    }

    /// Distillation loss for several episodes; joint embeddings are matched
    /// through the teacher's frozen aggregation block when it has one.
    pub fn loss(&self, tape: &mut Tape<f32>, p: &crate::numkit::Bound, teacher: &GraphModel, data: &[&StudentData]) -> Result<Var> {
        let parts: Vec<&GraphBatch> = data.iter().map(|d| &d.batch).collect();
        let batch = GraphBatch::merge(&parts);
        let x = self.own_rows(tape, p, &batch)?;
        let d = teacher.dim();
        let target: Vec<f32> = data.iter().flat_map(|s| s.teacher.iter().copied()).collect();
        let rows = target.len() / d;
        let mut loss = kd_loss(tape, x, &Tensor::new(&[rows, d], target)?)?;
        if let (Some(block), true) = (&teacher.ec, data.iter().all(|s| s.teacher_joint.is_some())) {
            let tp = tape.bind_frozen(&teacher.store);
            let mut joints = Vec::new();
            let mut start = 0;
            for s in data {
                for _ in 0..s.steps {
                    let xs = tape.slice_rows(x, start, s.agents)?;
                    joints.push(block.aggregate(tape, &tp, xs)?);
                    start += s.agents;
                }
            }
            let j = tape.concat_rows(&joints)?;
            let tj: Vec<f32> = data.iter().flat_map(|s| s.teacher_joint.clone().unwrap()).collect();
            let jl = kd_loss(tape, j, &Tensor::new(&[tj.len() / d, d], tj)?)?;
            loss = tape.add(loss, jl)?;
        }
        Ok(loss)
    }

    /// Untracked distillation loss.
    pub fn eval_loss(&self, teacher: &GraphModel, data: &[&StudentData]) -> Result<f64> {
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let l = self.loss(&mut tape, &p, teacher, data)?;
        Ok(tape.scalar(l) as f64)
    }

    pub fn train(&mut self, teacher: &GraphModel, data: &[StudentData], seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Input("no distillation data".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = AdamState::new(&self.store, AdamConfig::with_lr(self.config.lr));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let mut pick = Vec::new();
            while pick.len() < self.config.batch_episodes.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                pick.push(&data[order[cursor]]);
                cursor += 1;
            }
            let mut tape = Tape::new();
            let p = tape.bind(&self.store);
            let loss = self.loss(&mut tape, &p, teacher, &pick)?;
            losses.push(tape.scalar(loss) as f64);
            let grads = tape.backward(loss)?;
            let g = grads.params(&p, &self.store);
            adam_step(&mut self.store, &g, &mut state)?;
        }
        Ok(losses)
    }

    /// Student embeddings of every step and agent, in the teacher's layout.
    pub fn embed_episode(&self, teacher: &GraphModel, episode: &EpisodeRecord) -> Result<EpisodeEmbedding> {
        let graphs = self.episode_graphs(teacher, episode)?;
        let batch = GraphBatch::new(&graphs);
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let x = self.own_rows(&mut tape, &p, &batch)?;
        let n = episode.n_agents();
        let steps = graphs.len() / n.max(1);
        let joint = match &teacher.ec {
            Some(block) => {
                let tp = tape.bind_frozen(&teacher.store);
                let mut out = Vec::new();
                for t in 0..steps {
                    let xs = tape.slice_rows(x, t * n, n)?;
                    let j = block.aggregate(&mut tape, &tp, xs)?;
                    out.extend_from_slice(tape.value(j).data());
                }
                Some(out)
            }
            None => None,
        };
        Ok(EpisodeEmbedding { steps, agents: n, dim: teacher.dim(), x: tape.value(x).data().to_vec(), joint })
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_meta("student.config", serde_json::to_string(&self.config)?);
        self.store.write_into("student", ckpt);
        Ok(())
    }

    pub fn read_from(teacher: &GraphModel, ckpt: &Checkpoint) -> Result<Self> {
        let cfg: BeliefConfig = serde_json::from_str(
            ckpt.meta("student.config").ok_or_else(|| Error::Checkpoint("missing student.config".into()))?,
        )?;
        let mut s = Self::new(teacher, &cfg, 0)?;
        s.store.load_from("student", ckpt)?;
        Ok(s)
    }
}
