use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{subseed, AuctionConfig, ImpressionOpportunity, StepView};
use crate::numkit::{EdgeIndex, Tensor};

/// Layout of node feature vectors.
///
/// Every node carries `[type one-hot (VE, VN, IO) | agent block | IO block]`
/// with the block that does not apply left at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub categories: usize,
    /// Value-quantile boundaries used for per-bin bid/value ratios.
    pub boundaries: Vec<f64>,
    pub value_scale: f64,
}

pub const TYPE_DIM: usize = 3;
pub const IO_DIM: usize = 6;
const BASE_AGENT_DIM: usize = 5;

impl FeatureSpec {
    pub fn new(config: &AuctionConfig, bins: usize) -> Self {
        let s = config.value_sigma();
        Self {
            categories: config.categories,
            boundaries: config.value_quantiles(bins),
            value_scale: (config.base_value_mu + 0.5 * s * s).exp(),
        }
    }

    pub fn bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn agent_dim(&self) -> usize {
        BASE_AGENT_DIM + self.categories + 2 + 2 * self.bins() + 1
    }

    pub fn node_dim(&self) -> usize {
        TYPE_DIM + self.agent_dim() + IO_DIM
    }

    fn bin(&self, value: f64) -> usize {
        self.boundaries.partition_point(|b| *b <= value)
    }

    /// Public per-agent state plus last-step bidding summary.
    pub fn agent_features(&self, view: &StepView, agent: usize) -> Vec<f64> {
        let a = &view.agents[agent];
        let budget = a.profile.budget;
        let mut f = Vec::with_capacity(self.agent_dim());
        f.push(a.remaining() / budget);
        f.push(view.t as f64 / view.horizon as f64);
        f.push(a.cum_cost / budget);
        f.push(a.cum_value / budget);
        f.push(budget / view.budget_max);
        f.extend((0..self.categories).map(|c| if c == a.profile.category { 1.0 } else { 0.0 }));
        let bins = self.bins();
        let (mut bid_all, mut val_all) = (0.0, 0.0);
        let mut bid_bin = vec![0.0; bins];
        let mut val_bin = vec![0.0; bins];
        for b in view.last_bids.iter().filter(|b| b.agent == agent) {
            let v = view
                .last_live
                .iter()
                .find(|io| io.id == b.io)
                .and_then(|io| io.value_for(agent))
                .unwrap_or(0.0);
            if v > 0.0 {
                bid_all += b.bid;
                val_all += v;
                let k = self.bin(v);
                bid_bin[k] += b.bid;
                val_bin[k] += v;
            }
        }
        let ratio = |b: f64, v: f64| if v > 0.0 { (b / v, 1.0) } else { (0.0, 0.0) };
        let (r, flag) = ratio(bid_all, val_all);
        f.push(r);
        f.push(flag);
        for k in 0..bins {
            let (r, flag) = ratio(bid_bin[k], val_bin[k]);
            f.push(r);
            f.push(flag);
        }
        let win_frac = match &view.last_outcome {
            Some(o) if o.agents[agent].bids > 0 => o.agents[agent].wins as f64 / o.agents[agent].bids as f64,
            _ => 0.0,
        };
        f.push(win_frac);
        f
    }

    /// Agent-agnostic IO summary: value statistics over the exposure set.
    pub fn io_features(&self, io: &ImpressionOpportunity, t: usize, n_agents: usize, horizon: usize, max_slots: usize) -> Vec<f64> {
        let n = io.values.len() as f64;
        let mean = io.values.iter().map(|v| v.1).sum::<f64>() / n;
        let max = io.values.iter().map(|v| v.1).fold(0.0, f64::max);
        vec![
            mean / self.value_scale,
            max / self.value_scale,
            n / n_agents as f64,
            io.slots as f64 / max_slots as f64,
            io.phase(t),
            (io.t_end - t) as f64 / horizon as f64,
        ]
    }

    /// IO summary as seen by a single agent: only its own value is known.
    pub fn own_view_io_features(&self, io: &ImpressionOpportunity, agent: usize, t: usize, horizon: usize, max_slots: usize) -> Vec<f64> {
        let v = io.value_for(agent).unwrap_or(0.0) / self.value_scale;
        vec![
            v,
            v,
            0.0,
            io.slots as f64 / max_slots as f64,
            io.phase(t),
            (io.t_end - t) as f64 / horizon as f64,
        ]
    }

    pub fn node_row(&self, kind: NodeKind, agent: Option<&[f64]>, io: Option<&[f64]>) -> Vec<f64> {
        let mut row = vec![0.0; self.node_dim()];
        row[kind as usize] = 1.0;
        if let Some(a) = agent {
            row[TYPE_DIM..TYPE_DIM + a.len()].copy_from_slice(a);
        }
        if let Some(x) = io {
            let off = TYPE_DIM + self.agent_dim();
            row[off..off + x.len()].copy_from_slice(x);
        }
        row
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Exposed = 0,
    NonExposed = 1,
    Io = 2,
}

/// Bipartite agent/IO graph for one step.
///
/// Node order: `VE_0..VE_{n-1}`, `VN_0..VN_{n-1}`, then IO nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct AuctionGraph {
    pub n_agents: usize,
    pub io_ids: Vec<u64>,
    /// `[nodes × node_dim]`.
    pub features: Vec<Vec<f64>>,
    /// Undirected `(hub, io node)` pairs.
    pub edges: Vec<(usize, usize)>,
}

impl AuctionGraph {
    pub fn ve(&self, agent: usize) -> usize {
        agent
    }

    pub fn vn(&self, agent: usize) -> usize {
        self.n_agents + agent
    }

    pub fn io_node(&self, k: usize) -> usize {
        2 * self.n_agents + k
    }

    pub fn n_nodes(&self) -> usize {
        self.features.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == node || e.1 == node).count()
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| if a == node { Some(b) } else if b == node { Some(a) } else { None })
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|&e| e == (a, b) || e == (b, a))
    }

    /// Reorder IO nodes: new IO slot `k` holds old IO `perm[k]`.
    pub fn permute_ios(&self, perm: &[usize]) -> Self {
        let base = 2 * self.n_agents;
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let remap = |n: usize| if n < base { n } else { base + inv[n - base] };
        let mut features = self.features[..base].to_vec();
        features.extend(perm.iter().map(|&old| self.features[base + old].clone()));
        Self {
            n_agents: self.n_agents,
            io_ids: perm.iter().map(|&old| self.io_ids[old]).collect(),
            features,
            edges: self.edges.iter().map(|&(a, b)| (remap(a), remap(b))).collect(),
        }
    }

    pub fn edge_index(&self) -> EdgeIndex {
        EdgeIndex::undirected(&self.edges)
    }

    pub fn feature_tensor(&self) -> Tensor<f32> {
        let dim = self.features.first().map_or(0, |r| r.len());
        let data: Vec<f64> = self.features.iter().flatten().copied().collect();
        Tensor::from_f64(&[self.features.len(), dim], &data).expect("rectangular features")
    }
}

/// Build the step graph; non-exposed links are sampled per agent, at most
/// `cap_m` of them, from IOs ordered by id.
pub fn build_graph(view: &StepView, spec: &FeatureSpec, cap_m: usize, seed: u64) -> AuctionGraph {
    let n = view.n_agents();
    let mut ios: Vec<&ImpressionOpportunity> = view.live.iter().collect();
    ios.sort_by_key(|io| io.id);
    let mut features = Vec::with_capacity(2 * n + ios.len());
    let agent_feats: Vec<Vec<f64>> = (0..n).map(|i| spec.agent_features(view, i)).collect();
    for kind in [NodeKind::Exposed, NodeKind::NonExposed] {
        for a in &agent_feats {
            features.push(spec.node_row(kind, Some(a), None));
        }
    }
    for io in &ios {
        let x = spec.io_features(io, view.t, n, view.horizon, view.max_slots);
        features.push(spec.node_row(NodeKind::Io, None, Some(&x)));
    }
    let mut edges = Vec::new();
    for agent in 0..n {
        let mut hidden = Vec::new();
        for (k, io) in ios.iter().enumerate() {
            if io.exposed(agent) {
                edges.push((agent, 2 * n + k));
            } else {
                hidden.push(k);
            }
        }
        let keep = cap_m.min(hidden.len());
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, agent as u64 + 1));
        let mut chosen: Vec<usize> = sample(&mut rng, hidden.len(), keep).into_iter().map(|j| hidden[j]).collect();
        chosen.sort_unstable();
        edges.extend(chosen.into_iter().map(|k| (n + agent, 2 * n + k)));
    }
    AuctionGraph { n_agents: n, io_ids: ios.iter().map(|io| io.id).collect(), features, edges }
}

/// Seed for the graph of step `t` in the episode with seed `episode_seed`.
pub fn graph_seed(episode_seed: u64, t: usize) -> u64 {
    subseed(episode_seed ^ 0x6A09_E667_F3BC_C908, t as u64)
}

/// Disjoint union of several graphs so they can be encoded in one pass.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Tensor<f32>,
    pub edges: EdgeIndex,
    /// Node offset of each member graph.
    pub offsets: Vec<usize>,
    pub n_agents: Vec<usize>,
    pub n_nodes: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[AuctionGraph]) -> Self {
        let dim = graphs.iter().find_map(|g| g.features.first().map(|r| r.len())).unwrap_or(0);
        let mut data = Vec::new();
        let mut pairs = Vec::new();
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut off = 0;
        for g in graphs {
            offsets.push(off);
            for r in &g.features {
                data.extend(r.iter().copied());
            }
            pairs.extend(g.edges.iter().map(|&(a, b)| (a + off, b + off)));
            off += g.n_nodes();
        }
        Self {
            features: Tensor::from_f64(&[off.max(1), dim.max(1)], &if off == 0 { vec![0.0] } else { data })
                .expect("rectangular batch"),
            edges: EdgeIndex::undirected(&pairs),
            offsets,
            n_agents: graphs.iter().map(|g| g.n_agents).collect(),
            n_nodes: off,
        }
    }

    pub fn ve_rows(&self, g: usize) -> Vec<usize> {
        (0..self.n_agents[g]).map(|i| self.offsets[g] + i).collect()
    }

    pub fn vn_rows(&self, g: usize) -> Vec<usize> {
        (0..self.n_agents[g]).map(|i| self.offsets[g] + self.n_agents[g] + i).collect()
    }

    pub fn io_row(&self, g: usize, k: usize) -> usize {
        self.offsets[g] + 2 * self.n_agents[g] + k
    }

    /// Disjoint union of batches, in order.
    pub fn merge(parts: &[&GraphBatch]) -> Self {
        let dim = parts.iter().find(|b| b.n_nodes > 0).map_or(1, |b| b.features.shape()[1]);
        let mut data = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = Vec::new();
        let mut n_agents = Vec::new();
        let mut off = 0;
        for b in parts {
            if b.n_nodes > 0 {
                data.extend_from_slice(b.features.data());
            }
            src.extend(b.edges.src.iter().map(|s| s + off));
            dst.extend(b.edges.dst.iter().map(|d| d + off));
            offsets.extend(b.offsets.iter().map(|o| o + off));
            n_agents.extend_from_slice(&b.n_agents);
            off += b.n_nodes;
        }
        if off == 0 {
            data = vec![0.0; dim];
        }
        Self {
            features: Tensor::new(&[off.max(1), dim], data).expect("rectangular batch"),
            edges: EdgeIndex { src, dst },
            offsets,
            n_agents,
            n_nodes: off,
        }
    }
}
