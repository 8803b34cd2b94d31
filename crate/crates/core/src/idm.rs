//! Inverse dynamics model: per-IO bids from consecutive latent states.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{EpisodeRecord, StepView};
use crate::error::{Error, Result};
use crate::graph::{EmbedOut, GraphBatch, GraphModel};
use crate::numkit::{adam_step, AdamConfig, AdamState, Checkpoint, Mlp, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmConfig {
    pub hidden: usize,
    pub lr: f64,
    /// Joint steps where encoder and IDM share the learning rate.
    pub steps: usize,
    /// Further joint steps with the encoder learning rate scaled down.
    pub finetune_steps: usize,
    pub gnn_lr_scale: f64,
    pub batch_episodes: usize,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self { hidden: 128, lr: 1e-3, steps: 1500, finetune_steps: 500, gnn_lr_scale: 0.1, batch_episodes: 8 }
    }
}

/// Agent context `c_t^i`: remaining budget fraction, normalized time,
/// cumulative cost and return over budget, category one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn dim(categories: usize) -> usize {
        4 + categories
    }

    pub fn new(view: &StepView, agent: usize) -> Self {
        let a = &view.agents[agent];
        let b = a.profile.budget;
        let mut c = vec![a.remaining() / b, view.t as f64 / view.horizon as f64, a.cum_cost / b, a.cum_value / b];
        c.extend((0..view.categories).map(|k| if k == a.profile.category { 1.0 } else { 0.0 }));
        Self(c)
    }
}

/// MLP over `[x_t, x_{t+1}, f_k, v_k, c]` with a softplus output.
#[derive(Clone, Debug)]
pub struct Idm {
    pub mlp: Mlp,
    pub store: ParamStore<f32>,
    pub x_dim: usize,
    pub io_dim: usize,
    pub ctx_dim: usize,
    /// Bids are modelled in units of this scale.
    pub bid_scale: f64,
}

impl Idm {
    pub fn new(x_dim: usize, io_dim: usize, ctx_dim: usize, hidden: usize, bid_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = 2 * x_dim + io_dim + 1 + ctx_dim;
        let mlp = Mlp::new(&mut store, "idm", &[input, hidden, hidden, 1], &mut rng);
        Self { mlp, store, x_dim, io_dim, ctx_dim, bid_scale }
    }

    pub fn for_model(graph: &GraphModel, categories: usize, hidden: usize, seed: u64) -> Self {
        Self::new(graph.dim(), graph.dim(), ContextVector::dim(categories), hidden, graph.spec.value_scale, seed)
    }

    pub fn input_dim(&self) -> usize {
        2 * self.x_dim + self.io_dim + 1 + self.ctx_dim
    }

    pub fn zero_final_layer(&mut self) {
        let last = self.mlp.last().clone();
        self.store.get_mut(last.w).data_mut().fill(0.0);
        self.store.get_mut(last.b).data_mut().fill(0.0);
    }

    /// Predicted bids `[m×1]` in `bid_scale` units.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &crate::numkit::Bound, input: Var) -> Result<Var> {
        let w = tape.value(input).dims2().1;
        if w != self.input_dim() {
            return Err(Error::Config(format!("IDM expects {} inputs, got {w}", self.input_dim())));
        }
        let y = self.mlp.forward(tape, p, input)?;
        Ok(tape.softplus(y))
    }

    /// Single untracked bid prediction in currency units.
    pub fn predict(&self, x_t: &[f32], x_next: &[f32], f_k: &[f32], value: f64, c: &ContextVector) -> Result<f64> {
        let mut row: Vec<f32> = Vec::with_capacity(self.input_dim());
        row.extend_from_slice(x_t);
        row.extend_from_slice(x_next);
        row.extend_from_slice(f_k);
        row.push((value / self.bid_scale) as f32);
        row.extend(c.0.iter().map(|&v| v as f32));
        let rows = self.predict_rows(&row)?;
        Ok(rows[0])
    }

    /// Untracked predictions for a row-major input matrix.
    pub fn predict_rows(&self, rows: &[f32]) -> Result<Vec<f64>> {
        let w = self.input_dim();
        if !rows.len().is_multiple_of(w) {
            return Err(Error::Config(format!("IDM input length {} is not a multiple of {w}", rows.len())));
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let x = tape.constant(Tensor::new(&[rows.len() / w, w], rows.to_vec())?);
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).data().iter().map(|&v| v as f64 * self.bid_scale).collect())
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("idm.dims", format!("{} {} {} {}", self.x_dim, self.io_dim, self.ctx_dim, self.bid_scale));
        self.store.write_into("idm", ckpt);
    }

    pub fn read_from(ckpt: &Checkpoint, hidden: usize) -> Result<Self> {
        let dims = ckpt.meta("idm.dims").ok_or_else(|| Error::Checkpoint("missing idm.dims".into()))?;
        let v: Vec<f64> = dims.split(' ').map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Checkpoint(format!("idm.dims: {e}")))?;
        if v.len() != 4 {
            return Err(Error::Checkpoint("idm.dims needs 4 fields".into()));
        }
        let mut m = Self::new(v[0] as usize, v[1] as usize, v[2] as usize, hidden, v[3], 0);
        m.store.load_from("idm", ckpt)?;
        Ok(m)
    }
}

/// Mean squared error between predictions and targets.
pub fn graph_loss<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[f32]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Input("IDM batch is empty".into()));
    }
    let t = tape.constant(Tensor::new(&[targets.len(), 1], targets.iter().map(|&v| T::c(v as f64)).collect())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.mean_all(sq))
}

/// One `(t, agent, exposed IO)` training tuple, indexed relative to its episode.
#[derive(Clone, Debug)]
pub struct TupleIndex {
    pub t: usize,
    pub agent: usize,
    pub io: u64,
    /// Row of the IO node within the episode's graph batch.
    pub io_row: usize,
    pub value: f64,
    pub bid: f64,
}

/// Precomputed graphs and tuples of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeData {
    pub batch: GraphBatch,
    pub tuples: Vec<TupleIndex>,
    /// `[tuples × ctx_dim]` contexts.
    pub context: Vec<f32>,
    pub agents: usize,
}

impl EpisodeData {
    pub fn new(model: &GraphModel, episode: &EpisodeRecord) -> Result<Self> {
        let graphs = model.episode_graphs(episode)?;
        let views = episode.views()?;
        let batch = GraphBatch::new(&graphs);
        let mut tuples = Vec::new();
        let mut context = Vec::new();
        for (t, step) in episode.steps.iter().enumerate() {
            let g = &graphs[t];
            let view = &views[t];
            for b in &step.bids {
                let k = g.io_ids.binary_search(&b.io).map_err(|_| Error::Input(format!("bid on unknown IO {}", b.io)))?;
                let value = view.live.iter().find(|io| io.id == b.io).and_then(|io| io.value_for(b.agent)).unwrap_or(0.0);
                tuples.push(TupleIndex { t, agent: b.agent, io: b.io, io_row: batch.io_row(t, k), value, bid: b.bid });
                context.extend(ContextVector::new(view, b.agent).0.iter().map(|&v| v as f32));
            }
        }
        Ok(Self { batch, tuples, context, agents: episode.n_agents() })
    }
}

/// Assemble IDM inputs for several episodes already embedded in one pass.
///
/// `offsets[e]` gives the node and agent-row offsets of episode `e`.
fn tuple_inputs(
    tape: &mut Tape<f32>,
    out: &EmbedOut,
    data: &[&EpisodeData],
    node_off: &[usize],
    row_off: &[usize],
    graph_off: &[usize],
    idm: &Idm,
) -> Result<(Var, Vec<f32>)> {
    let mut xt = Vec::new();
    let mut xn = Vec::new();
    let mut io = Vec::new();
    let mut extra = Vec::new();
    let mut targets = Vec::new();
    let ctx = idm.ctx_dim;
    for (e, d) in data.iter().enumerate() {
        for (j, tu) in d.tuples.iter().enumerate() {
            match out.joint {
                Some(_) => {
                    xt.push(graph_off[e] + tu.t);
                    xn.push(graph_off[e] + tu.t + 1);
                }
                None => {
                    xt.push(row_off[e] + tu.t * d.agents + tu.agent);
                    xn.push(row_off[e] + (tu.t + 1) * d.agents + tu.agent);
                }
            }
            io.push(node_off[e] + tu.io_row);
            extra.push((tu.value / idm.bid_scale) as f32);
            extra.extend_from_slice(&d.context[j * ctx..(j + 1) * ctx]);
            targets.push((tu.bid / idm.bid_scale) as f32);
        }
    }
    let source = out.joint.unwrap_or(out.agents);
    let a = tape.gather_rows(source, &xt)?;
    let b = tape.gather_rows(source, &xn)?;
    let f = tape.gather_rows(out.nodes, &io)?;
    let rest = tape.constant(Tensor::new(&[targets.len().max(1), 1 + ctx], if targets.is_empty() { vec![0.0; 1 + ctx] } else { extra })?);
    let input = tape.concat_cols(&[a, b, f, rest])?;
    Ok((input, targets))
}

fn merged(data: &[&EpisodeData]) -> (GraphBatch, Vec<usize>, Vec<usize>, Vec<usize>) {
    let batches: Vec<&GraphBatch> = data.iter().map(|d| &d.batch).collect();
    let mut node_off = Vec::new();
    let mut row_off = Vec::new();
    let mut graph_off = Vec::new();
    let (mut n, mut r, mut g) = (0, 0, 0);
    for b in &batches {
        node_off.push(n);
        row_off.push(r);
        graph_off.push(g);
        n += b.n_nodes;
        r += b.n_agents.iter().sum::<usize>();
        g += b.offsets.len();
    }
    (GraphBatch::merge(&batches), node_off, row_off, graph_off)
}

/// Loss of the encoder plus IDM on a set of episodes; optionally adds the
/// self-predictive term.
pub fn batch_loss(
    tape: &mut Tape<f32>,
    graph: &mut GraphModel,
    idm: &Idm,
    gp: &crate::numkit::Bound,
    ip: &crate::numkit::Bound,
    data: &[&EpisodeData],
) -> Result<Var> {
    let (batch, node_off, row_off, graph_off) = merged(data);
    let out = graph.embed(tape, gp, &batch)?;
    let (input, targets) = tuple_inputs(tape, &out, data, &node_off, &row_off, &graph_off, idm)?;
    let pred = idm.forward(tape, ip, input)?;
    let mut loss = graph_loss(tape, pred, &targets)?;
    if graph.config.spl {
        for (e, d) in data.iter().enumerate() {
            let steps = d.batch.offsets.len();
            let agents = tape.slice_rows(out.agents, row_off[e], steps * d.agents)?;
            let joint = match out.joint {
                Some(j) => Some(tape.slice_rows(j, graph_off[e], steps)?),
                None => None,
            };
            let local = EmbedOut { nodes: out.nodes, agents, joint };
            if let Some(s) = graph.spl_term(tape, gp, &local, &d.batch)? {
                let w = graph.config.spl_weight / data.len() as f64;
                let s = tape.scale(s, w);
                loss = tape.add(loss, s)?;
            }
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Joint encoder + IDM training; the last `finetune_steps` scale the encoder
/// learning rate by `gnn_lr_scale`.
pub fn train_graph_idm(
    graph: &mut GraphModel,
    idm: &mut Idm,
    data: &[EpisodeData],
    config: &IdmConfig,
    seed: u64,
) -> Result<TrainLog> {
    if data.iter().all(|d| d.tuples.is_empty()) {
        return Err(Error::Input("no training tuples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g_state = AdamState::new(&graph.store, AdamConfig::with_lr(config.lr));
    let mut i_state = AdamState::new(&idm.store, AdamConfig::with_lr(config.lr));
    let usable: Vec<usize> = (0..data.len()).filter(|&e| !data[e].tuples.is_empty()).collect();
    let mut order = usable.clone();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    for step in 0..config.steps + config.finetune_steps {
        if step == config.steps {
            g_state.config.lr = config.lr * config.gnn_lr_scale;
        }
        let mut pick = Vec::with_capacity(config.batch_episodes);
        while pick.len() < config.batch_episodes.min(usable.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pick.push(&data[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let gp = tape.bind(&graph.store);
        let ip = tape.bind(&idm.store);
        let loss = batch_loss(&mut tape, graph, idm, &gp, &ip, &pick)?;
        log.losses.push(tape.scalar(loss) as f64);
        let grads = tape.backward(loss)?;
        let gg = grads.params(&gp, &graph.store);
        let ig = grads.params(&ip, &idm.store);
        adam_step(&mut graph.store, &gg, &mut g_state)?;
        adam_step(&mut idm.store, &ig, &mut i_state)?;
        graph.update_target();
    }
    Ok(log)
}

/// One predicted bid with its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidPrediction {
    pub t: usize,
    pub agent: usize,
    pub io: u64,
    pub predicted: f64,
    pub actual: f64,
}

/// Predict every recorded bid of an episode from its own embeddings.
pub fn predict_episode(graph: &GraphModel, idm: &Idm, data: &EpisodeData) -> Result<Vec<BidPrediction>> {
    if data.tuples.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::inference();
    let gp = tape.bind_frozen(&graph.store);
    let ip = tape.bind_frozen(&idm.store);
    let out = graph.embed(&mut tape, &gp, &data.batch)?;
    let (input, _) = tuple_inputs(&mut tape, &out, &[data], &[0], &[0], &[0], idm)?;
    let pred = idm.forward(&mut tape, &ip, input)?;
    Ok(data
        .tuples
        .iter()
        .zip(tape.value(pred).data())
        .map(|(tu, &p)| BidPrediction { t: tu.t, agent: tu.agent, io: tu.io, predicted: p as f64 * idm.bid_scale, actual: tu.bid })
        .collect())
}

/// Mean over `(episode, step)` pairs of the ℓ2 distance between predicted and
/// true bid vectors, per agent. Steps where an agent has no exposed IO are
/// skipped. `episodes` holds one prediction list per episode.
pub fn bid_accuracy(episodes: &[Vec<BidPrediction>], n_agents: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_agents];
    let mut count = vec![0usize; n_agents];
    for preds in episodes {
        let mut per: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        for p in preds {
            *per.entry((p.agent, p.t)).or_insert(0.0) += (p.predicted - p.actual).powi(2);
        }
        for ((agent, _), sq) in per {
            sum[agent] += sq.sqrt();
            count[agent] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::AuctionConfig;
    use crate::graph::GraphConfig;

    #[test]
    fn zero_final_layer_predicts_ln2() {
        let mut idm = Idm::new(3, 3, 2, 16, 1.0, 1);
        idm.zero_final_layer();
        let c = ContextVector(vec![0.5, 0.1]);
        let p = idm.predict(&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0], &[0.2, 0.2, 0.2], 4.0, &c).unwrap();
        assert!((p - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn predictions_are_nonnegative() {
        use rand::Rng;
        let idm = Idm::new(4, 4, 3, 32, 1.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<f32> = (0..1000 * idm.input_dim()).map(|_| rng.random_range(-20.0..20.0)).collect();
        assert!(idm.predict_rows(&rows).unwrap().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn wrong_width_is_config_error() {
        let idm = Idm::new(4, 4, 3, 8, 1.0, 2);
        assert!(matches!(idm.predict_rows(&[0.0; 5]), Err(Error::Config(_))));
    }

    #[test]
    fn mse_closed_forms() {
        let mut tape = Tape::<f32>::new();
        let p = tape.leaf(Tensor::new(&[2, 1], vec![1.5, 1.5]).unwrap());
        let l = graph_loss(&mut tape, p, &[0.0, 2.0]).unwrap();
        assert!((tape.scalar(l) - (1.5f32.powi(2) + 0.25) / 2.0).abs() < 1e-6);
        let q = tape.leaf(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
        let z = graph_loss(&mut tape, q, &[0.0, 2.0]).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        assert!(graph_loss(&mut tape, q, &[]).is_err());
    }

    #[test]
    fn accuracy_single_io() {
        let p = BidPrediction { t: 0, agent: 0, io: 0, predicted: 3.0, actual: 0.0 };
        assert_eq!(bid_accuracy(&[vec![p]], 1), vec![3.0]);
        let q = BidPrediction { predicted: 1.0, actual: 1.0, ..p };
        assert_eq!(bid_accuracy(&[vec![q]], 1), vec![0.0]);
    }

    #[test]
    fn encoder_receives_gradient_from_bid_loss() {
        let auction = AuctionConfig { agents: 3, horizon: 4, ..Default::default() };
        let ep = crate::bidders::simulate_episode(&auction, &Default::default(), 3).unwrap();
        let mut g = GraphModel::new(&GraphConfig { d: 8, ..Default::default() }, &auction, 1).unwrap();
        let idm = Idm::for_model(&g, auction.categories, 16, 2);
        let data = EpisodeData::new(&g, &ep).unwrap();
        let mut tape = Tape::new();
        let gp = tape.bind(&g.store);
        let ip = tape.bind(&idm.store);
        let loss = batch_loss(&mut tape, &mut g, &idm, &gp, &ip, &[&data]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let norm: f64 = grads.params(&gp, &g.store).iter().flat_map(|t| t.to_f64_vec()).map(|v| v * v).sum();
        assert!(norm > 0.0);
    }
}
