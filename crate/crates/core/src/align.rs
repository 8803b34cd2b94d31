//! Multi-KPI value function, plan scoring, budget-feasible best-of-N
//! planning, rejection-sampling fine-tuning and the closed-loop bidder.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::env::subseed;
use crate::auction::kpi::{cpa, roi};
use crate::auction::{AuctionConfig, Bid, EpisodeRecord, StepView};
use crate::bidders::parallel_map;
use crate::error::{Error, Result};
use crate::graph::{build_graph, graph_seed, EpisodeEmbedding, GraphBatch, GraphModel};
use crate::idm::{ContextVector, Idm};
use crate::ldm::{condition_vector, Ldm, Trajectory};
use crate::numkit::{adam_step, AdamConfig, AdamState, Bound, Checkpoint, Mlp, ParamStore, Tape, Tensor, Var};

pub const KPI_NAMES: [&str; 5] = ["return", "cpa", "roi", "win_rate", "social_welfare"];
/// Index of the remaining-spend output (as a fraction of budget).
pub const SPEND: usize = 5;
pub const OUTPUTS: usize = 6;
/// Remainder CPA and ROI are clipped to this magnitude so that spend with
/// no return stays a finite regression target.
pub const RATIO_CAP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub tau: f64,
    pub gamma: f64,
    pub weights: [f64; 5],
    /// Candidates per best-of-N plan.
    pub candidates: usize,
    /// Samples per rejection-sampling round.
    pub samples: usize,
    pub keep: f64,
    pub rounds: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub hidden: usize,
    pub value_lr: f64,
    pub value_steps: usize,
    pub value_batch: usize,
    /// Agents driven by the planner during evaluation.
    pub controlled: Vec<usize>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            gamma: 1.0,
            weights: [1.0, -1.0, 1.0, 1.0, 1.0],
            candidates: 8,
            samples: 32,
            keep: 0.25,
            rounds: 2,
            finetune_steps: 100,
            finetune_lr: 5e-4,
            hidden: 64,
            value_lr: 1e-3,
            value_steps: 1000,
            value_batch: 64,
            controlled: vec![0],
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("expectile tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount must lie in (0, 1], got {}", self.gamma)));
        }
        KpiWeights(self.weights).validate()?;
        if self.candidates == 0 {
            return Err(Error::Config("best-of-N needs at least one candidate".into()));
        }
        if self.samples < 10 || !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Config("rejection sampling needs samples >= 10 and keep in (0, 1]".into()));
        }
        if self.value_batch == 0 {
            return Err(Error::Config("value_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Signed KPI weights; CPA carries a negative weight to prefer lower cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiWeights(pub [f64; 5]);

impl KpiWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|&w| w == 0.0) || self.0.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("KPI weights must be finite with at least one nonzero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.map(|w| w * k))
    }
}

/// Per-output mean and std over the offline dataset; frozen after fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; OUTPUTS],
    pub std: [f64; OUTPUTS],
}

impl NormStats {
    pub fn fit(samples: &[ValueSample]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = [0.0; OUTPUTS];
        let mut std = [0.0; OUTPUTS];
        for s in samples {
            for j in 0..OUTPUTS {
                mean[j] += s.target[j] / n;
            }
        }
        for s in samples {
            for j in 0..OUTPUTS {
                std[j] += (s.target[j] - mean[j]).powi(2) / n;
            }
        }
        Self { mean, std: std.map(f64::sqrt) }
    }
}

/// One value-regression example.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueSample {
    pub x: Vec<f32>,
    pub cond: Vec<f32>,
    pub target: [f64; OUTPUTS],
}

/// Episode-remainder KPI targets of `agent` from step `t` onwards,
/// discounted by `gamma`.
pub fn remainder_targets(episode: &EpisodeRecord, agent: usize, t: usize, gamma: f64) -> [f64; OUTPUTS] {
    let (mut cost, mut ret, mut welfare, mut wins, mut bids) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut disc = 1.0;
    for step in episode.steps.iter().skip(t) {
        let a = &step.outcome.agents[agent];
        cost += disc * a.cost;
        ret += disc * a.value;
        wins += a.wins as f64;
        bids += a.bids as f64;
        welfare += disc * step.outcome.agents.iter().map(|x| x.value).sum::<f64>();
        disc *= gamma;
    }
    let win_rate = if bids > 0.0 { wins / bids } else { 0.0 };
    [
        ret,
        cpa(cost, ret).min(RATIO_CAP),
        roi(cost, ret).clamp(-RATIO_CAP, RATIO_CAP),
        win_rate,
        welfare,
        cost / episode.profiles[agent].budget,
    ]
}

/// Value samples for every agent and step `0..=H` of an embedded episode.
pub fn value_samples(emb: &EpisodeEmbedding, episode: &EpisodeRecord, gamma: f64) -> Vec<ValueSample> {
    let cfg = &episode.config;
    let mut out = Vec::with_capacity(emb.steps * emb.agents);
    for t in 0..emb.steps {
        for i in 0..emb.agents {
            let p = &episode.profiles[i];
            out.push(ValueSample {
                x: emb.agent(t, i).to_vec(),
                cond: condition_vector(p.category, cfg.categories, p.budget, cfg.budget_max),
                target: remainder_targets(episode, i, t, gamma),
            });
        }
    }
    out
}

/// Asymmetric squared loss `|τ − 1{u<0}|·u²`, `u = target − pred`, averaged
/// over every element (equivalently per KPI dimension, then across them).
pub fn expectile_loss(tape: &mut Tape<f32>, pred: Var, target: &Tensor<f32>, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("expectile tau must lie in (0, 1), got {tau}")));
    }
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::Dimension(format!("prediction {:?} vs target {:?}", tape.value(pred).shape(), target.shape())));
    }
    let w: Vec<f32> = tape
        .value(pred)
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| if t - p < 0.0 { (1.0 - tau) as f32 } else { tau as f32 })
        .collect();
    let t = tape.constant(target.clone());
    let u = tape.sub(t, pred)?;
    let sq = tape.square(u);
    let wv = tape.constant(Tensor::new(target.shape(), w)?);
    let weighted = tape.mul(sq, wv)?;
    Ok(tape.mean_all(weighted))
}

/// MLP from `[x, condition]` to normalized remainder KPIs plus spend.
#[derive(Clone, Debug)]
pub struct ValueHead {
    pub mlp: Mlp,
    pub store: ParamStore<f32>,
    pub x_dim: usize,
    pub cond_dim: usize,
    pub stats: NormStats,
    /// KPIs skipped during scoring because their std was zero.
    pub skipped_kpis: u64,
}

impl ValueHead {
    pub fn new(x_dim: usize, cond_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "value", &[x_dim + cond_dim, hidden, hidden, OUTPUTS], &mut rng);
        Self {
            mlp,
            store,
            x_dim,
            cond_dim,
            stats: NormStats { mean: [0.0; OUTPUTS], std: [1.0; OUTPUTS] },
            skipped_kpis: 0,
        }
    }

    fn rows(&self, batch: &[&ValueSample]) -> Result<Tensor<f32>> {
        let w = self.x_dim + self.cond_dim;
        let mut data = Vec::with_capacity(batch.len() * w);
        for s in batch {
            if s.x.len() != self.x_dim || s.cond.len() != self.cond_dim {
                return Err(Error::Dimension(format!("value head expects {}+{} inputs", self.x_dim, self.cond_dim)));
            }
            data.extend_from_slice(&s.x);
            data.extend_from_slice(&s.cond);
        }
        Tensor::new(&[batch.len(), w], data)
    }

    fn normalized(&self, target: &[f64; OUTPUTS]) -> [f32; OUTPUTS] {
        std::array::from_fn(|j| {
            let s = self.stats.std[j];
            if s > 0.0 { ((target[j] - self.stats.mean[j]) / s) as f32 } else { 0.0 }
        })
    }

    /// Normalized predictions (z-scores) for one input.
    pub fn predict_z(&self, x: &[f32], cond: &[f32]) -> Result<[f64; OUTPUTS]> {
        let s = ValueSample { x: x.to_vec(), cond: cond.to_vec(), target: [0.0; OUTPUTS] };
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let input = tape.constant(self.rows(&[&s])?);
        let y = self.mlp.forward(&mut tape, &p, input)?;
        let v = tape.value(y).data();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Eval("non-finite value prediction".into()));
        }
        Ok(std::array::from_fn(|j| v[j] as f64))
    }

    /// Predictions in KPI units.
    pub fn predict(&self, x: &[f32], cond: &[f32]) -> Result<[f64; OUTPUTS]> {
        let z = self.predict_z(x, cond)?;
        Ok(std::array::from_fn(|j| z[j] * self.stats.std[j] + self.stats.mean[j]))
    }

    pub fn loss(&self, tape: &mut Tape<f32>, p: &Bound, batch: &[&ValueSample], tau: f64) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Input("empty value batch".into()));
        }
        let input = tape.constant(self.rows(batch)?);
        let pred = self.mlp.forward(tape, p, input)?;
        let t: Vec<f32> = batch.iter().flat_map(|s| self.normalized(&s.target)).collect();
        expectile_loss(tape, pred, &Tensor::new(&[batch.len(), OUTPUTS], t)?, tau)
    }

    /// One expectile-regression step.
    pub fn iql_value_update(&mut self, batch: &[&ValueSample], tau: f64, state: &mut AdamState<f32>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.store);
        let loss = self.loss(&mut tape, &p, batch, tau)?;
        let value = tape.scalar(loss) as f64;
        let g = tape.backward(loss)?.params(&p, &self.store);
        adam_step(&mut self.store, &g, state)?;
        Ok(value)
    }

    /// Fit normalization stats, then train; returns per-step losses.
    pub fn fit(&mut self, samples: &[ValueSample], config: &AlignConfig, seed: u64) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::Input("no value samples".into()));
        }
        self.stats = NormStats::fit(samples);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = AdamState::new(&self.store, AdamConfig::with_lr(config.value_lr));
        let b = config.value_batch.min(samples.len());
        let mut losses = Vec::with_capacity(config.value_steps);
        for _ in 0..config.value_steps {
            let idx = sample(&mut rng, samples.len(), b);
            let batch: Vec<&ValueSample> = idx.iter().map(|i| &samples[i]).collect();
            losses.push(self.iql_value_update(&batch, config.tau, &mut state)?);
        }
        Ok(losses)
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_meta("value.dims", format!("{} {}", self.x_dim, self.cond_dim));
        ckpt.set_meta("value.stats", serde_json::to_string(&self.stats)?);
        self.store.write_into("value", ckpt);
        Ok(())
    }

    pub fn read_from(ckpt: &Checkpoint, hidden: usize) -> Result<Self> {
        let missing = |k: &str| Error::Checkpoint(format!("missing {k}"));
        let dims: Vec<usize> = ckpt
            .meta("value.dims")
            .ok_or_else(|| missing("value.dims"))?
            .split(' ')
            .map(|v| v.parse().map_err(|e| Error::Checkpoint(format!("value.dims: {e}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Checkpoint("value.dims needs 2 fields".into()));
        }
        let mut h = Self::new(dims[0], dims[1], hidden, 0);
        h.stats = serde_json::from_str(ckpt.meta("value.stats").ok_or_else(|| missing("value.stats"))?)?;
        h.store.load_from("value", ckpt)?;
        Ok(h)
    }
}

/// `Σ_j w_j · zscore_j`, skipping KPIs whose std is zero. Returns the score
/// and the number of skipped KPIs.
pub fn weighted_score(z: &[f64; OUTPUTS], weights: &KpiWeights, stats: &NormStats) -> (f64, usize) {
    let mut score = 0.0;
    let mut skipped = 0;
    for j in 0..5 {
        if stats.std[j] > 0.0 {
            score += weights.0[j] * z[j];
        } else if weights.0[j] != 0.0 {
            skipped += 1;
        }
    }
    (score, skipped)
}

/// Score a raw step-major trajectory at step `end`.
pub fn score_trajectory(traj: &[f32], end: usize, cond: &[f32], head: &ValueHead, weights: &KpiWeights) -> Result<f64> {
    let d = head.x_dim;
    if traj.len() < (end + 1) * d {
        return Err(Error::Input(format!("trajectory has no step {end}")));
    }
    let z = head.predict_z(&traj[end * d..(end + 1) * d], cond)?;
    let (score, skipped) = weighted_score(&z, weights, &head.stats);
    if skipped > 0 {
        log::warn!("{skipped} KPI(s) with zero spread skipped while scoring");
    }
    Ok(score)
}

/// Known prefix of a plan window and where to read feasibility and score.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanContext {
    /// Raw step-major `[window × d]`; only the first `known` steps are used.
    pub x: Vec<f32>,
    pub known: usize,
    pub cond: Vec<f32>,
    /// Remaining budget as a fraction of the total.
    pub remaining: f64,
    /// Step scored by the value head.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanCandidate {
    pub id: u64,
    /// Raw step-major latent trajectory.
    pub x: Vec<f32>,
    pub score: f64,
    pub feasible: bool,
    pub fallback: bool,
    /// Predicted KPIs at the scored step, in KPI units.
    pub kpis: [f64; OUTPUTS],
}

/// Draw and evaluate one candidate.
pub fn sample_candidate(ldm: &Ldm, head: &ValueHead, weights: &KpiWeights, ctx: &PlanContext, id: u64, seed: u64) -> Result<PlanCandidate> {
    let (d, w) = (ldm.dim(), ldm.config.window);
    if ctx.x.len() != d * w || ctx.known == 0 || ctx.known >= w || ctx.end >= w || ctx.end < ctx.known {
        return Err(Error::Input(format!("plan context must be {w}x{d} with 0 < known <= end < {w}")));
    }
    let known = Trajectory { z: ldm.encode_window(&ctx.x), mask: (0..w).map(|t| t < ctx.known).collect(), cond: ctx.cond.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = ldm.sample_inpaint(&known, &mut rng, ldm.config.resample)?;
    let mut x = ldm.decode_window(&z);
    x[..ctx.known * d].copy_from_slice(&ctx.x[..ctx.known * d]);
    let next = &x[ctx.known * d..(ctx.known + 1) * d];
    let spend = head.predict(next, &ctx.cond)?[SPEND];
    let feasible = spend <= ctx.remaining;
    let score = score_trajectory(&x, ctx.end, &ctx.cond, head, weights)?;
    let kpis = head.predict(&x[ctx.end * d..(ctx.end + 1) * d], &ctx.cond)?;
    Ok(PlanCandidate { id, x, score, feasible, fallback: false, kpis })
}

/// Highest-scoring feasible candidate among `n` draws (lowest id on ties),
/// or a flagged zero-bid fallback when none is feasible.
pub fn select_plan(candidates: Vec<PlanCandidate>, ctx: &PlanContext, id: u64) -> PlanCandidate {
    let mut best: Option<PlanCandidate> = None;
    for c in candidates.into_iter().filter(|c| c.feasible) {
        if best.as_ref().is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    }
    best.unwrap_or_else(|| PlanCandidate {
        id,
        x: ctx.x.clone(),
        score: f64::NEG_INFINITY,
        feasible: false,
        fallback: true,
        kpis: [0.0; OUTPUTS],
    })
}

pub fn best_of_n_plan(ldm: &Ldm, head: &ValueHead, weights: &KpiWeights, ctx: &PlanContext, n: usize, seed: u64) -> Result<PlanCandidate> {
    if n == 0 {
        return Err(Error::Input("best-of-N needs N >= 1".into()));
    }
    let cands = parallel_map(n, |j| sample_candidate(ldm, head, weights, ctx, j as u64, subseed(seed, j as u64)))?;
    Ok(select_plan(cands, ctx, n as u64))
}

/// Number kept from `m` samples at quantile `q`.
pub fn keep_count(m: usize, q: f64) -> usize {
    ((q * m as f64).ceil() as usize).clamp(1, m)
}

/// Ids of the top `keep_count(m, q)` scores (lowest id on ties); a random
/// subset when all scores are equal.
pub fn select_kept(scores: &[(u64, f64)], q: f64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let k = keep_count(scores.len(), q);
    let degenerate = scores.windows(2).all(|w| w[0].1 == w[1].1);
    let mut ids: Vec<u64> = if degenerate {
        sample(rng, scores.len(), k).iter().map(|i| scores[i].0).collect()
    } else {
        let mut order: Vec<&(u64, f64)> = scores.iter().collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        order.iter().take(k).map(|s| s.0).collect()
    };
    ids.sort_unstable();
    ids
}

/// One rejection-sampling round's log row plus its provenance audit trail.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RaftRound {
    pub round: usize,
    pub mean_score: f64,
    pub kept_fraction: f64,
    pub kpi_means: [f64; 5],
    #[serde(skip)]
    pub sampled: Vec<u64>,
    #[serde(skip)]
    pub kept: Vec<u64>,
    #[serde(skip)]
    pub trained: Vec<u64>,
}

impl RaftRound {
    /// Every trained sample id was kept.
    pub fn audit(&self) -> bool {
        let kept: BTreeSet<u64> = self.kept.iter().copied().collect();
        self.trained.iter().all(|id| kept.contains(id))
    }
}

/// Sample `m` plans from pool contexts, keep the top `q` fraction and
/// fine-tune the denoiser on them with the contexts' masks.
#[allow(clippy::too_many_arguments)]
pub fn raft_round(
    ldm: &mut Ldm,
    head: &ValueHead,
    weights: &KpiWeights,
    pool: &[PlanContext],
    m: usize,
    q: f64,
    steps: usize,
    lr: f64,
    round: usize,
    seed: u64,
) -> Result<RaftRound> {
    if m < 10 || !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("raft round needs M >= 10 and q in (0, 1], got {m} and {q}")));
    }
    if pool.is_empty() {
        return Err(Error::Input("empty context pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..pool.len())).collect();
    let base = (round as u64) << 32;
    let frozen: &Ldm = ldm;
    let cands = parallel_map(m, |j| {
        sample_candidate(frozen, head, weights, &pool[picks[j]], base + j as u64, subseed(seed, j as u64 + 1))
    })?;
    let scores: Vec<(u64, f64)> = cands.iter().map(|c| (c.id, c.score)).collect();
    let kept = select_kept(&scores, q, &mut rng);
    let mut trained = Vec::new();
    let mut set = Vec::new();
    for (j, c) in cands.iter().enumerate() {
        if kept.binary_search(&c.id).is_ok() {
            let ctx = &pool[picks[j]];
            let w = ldm.config.window;
            set.push(Trajectory { z: ldm.encode_window(&c.x), mask: (0..w).map(|t| t < ctx.known).collect(), cond: ctx.cond.clone() });
            trained.push(c.id);
        }
    }
    let mut state = AdamState::new(&ldm.store, AdamConfig::with_lr(lr));
    ldm.fit_with(&set, steps, &mut rng, &mut state, false)?;
    let n = cands.len() as f64;
    Ok(RaftRound {
        round,
        mean_score: cands.iter().map(|c| c.score).sum::<f64>() / n,
        kept_fraction: kept.len() as f64 / n,
        kpi_means: std::array::from_fn(|j| cands.iter().map(|c| c.kpis[j]).sum::<f64>() / n),
        sampled: cands.iter().map(|c| c.id).collect(),
        kept,
        trained,
    })
}

/// Mean score of fresh samples, one per context, with fixed seeds.
pub fn mean_sample_score(ldm: &Ldm, head: &ValueHead, weights: &KpiWeights, contexts: &[PlanContext], seed: u64) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Input("no contexts to score".into()));
    }
    let c = parallel_map(contexts.len(), |j| sample_candidate(ldm, head, weights, &contexts[j], j as u64, subseed(seed, j as u64)))?;
    Ok(c.iter().map(|c| c.score).sum::<f64>() / c.len() as f64)
}

/// Planning contexts from an embedded episode: for each agent and split `t`,
/// the last `min(t + 1, window / 2)` embeddings are known.
pub fn episode_contexts(emb: &EpisodeEmbedding, episode: &EpisodeRecord, window: usize) -> Vec<PlanContext> {
    let cfg = &episode.config;
    let d = emb.dim;
    let h = emb.steps - 1;
    let mut out = Vec::new();
    for i in 0..emb.agents {
        let p = &episode.profiles[i];
        let cond = condition_vector(p.category, cfg.categories, p.budget, cfg.budget_max);
        let seq = emb.agent_sequence(i);
        let mut spent = 0.0;
        for t in 0..h {
            let known = (t + 1).min(window / 2).max(1);
            let start = t + 1 - known;
            let mut x = vec![0.0f32; window * d];
            x[..known * d].copy_from_slice(&seq[start * d..(t + 1) * d]);
            out.push(PlanContext { x, known, cond: cond.clone(), remaining: 1.0 - spent / p.budget, end: plan_end(known, window, h - t) });
            spent += episode.steps[t].outcome.agents[i].cost;
        }
    }
    out
}

/// Last window position whose time is still inside the episode.
pub fn plan_end(known: usize, window: usize, steps_left: usize) -> usize {
    (known - 1 + steps_left).min(window - 1).max(known)
}

/// Trained components of the closed-loop bidder.
#[derive(Clone, Debug)]
pub struct Planner {
    pub graph: GraphModel,
    pub idm: Idm,
    pub ldm: Ldm,
    pub head: ValueHead,
    pub weights: KpiWeights,
    pub candidates: usize,
}

/// Per-episode memory of each agent's embeddings.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub x: Vec<Vec<Vec<f32>>>,
    pub fallbacks: u64,
    pub plans: u64,
}

impl Planner {
    /// Bids for the controlled agents at this step. Every exposed pair gets a
    /// bid; under `hard_budget` bids are capped by the remaining budget.
    pub fn act(&self, view: &StepView, controlled: &[usize], history: &mut History, episode_seed: u64, hard_budget: bool) -> Result<Vec<Bid>> {
        let n = view.n_agents();
        if history.x.len() != n {
            history.x = vec![Vec::new(); n];
        }
        let g = build_graph(view, &self.graph.spec, self.graph.config.cap_m, graph_seed(episode_seed, view.t));
        let batch = GraphBatch::new(std::slice::from_ref(&g));
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.graph.store);
        let out = self.graph.embed(&mut tape, &p, &batch)?;
        let agents = tape.value(out.agents).data().to_vec();
        let nodes = tape.value(out.nodes).data().to_vec();
        let d = self.graph.dim();
        for (i, h) in history.x.iter_mut().enumerate() {
            h.push(agents[i * d..(i + 1) * d].to_vec());
        }
        let w = self.ldm.config.window;
        let mut bids = Vec::new();
        for &i in controlled {
            if i >= n {
                return Err(Error::Input(format!("controlled agent {i} out of range")));
            }
            let exposed: Vec<(usize, u64, f64)> = g
                .io_ids
                .iter()
                .enumerate()
                .filter_map(|(k, &id)| view.live.iter().find(|io| io.id == id).and_then(|io| io.value_for(i)).map(|v| (k, id, v)))
                .collect();
            if exposed.is_empty() {
                continue;
            }
            let a = &view.agents[i];
            let seq = &history.x[i];
            let known = seq.len().min(w / 2).max(1);
            let mut x = vec![0.0f32; w * d];
            for (s, e) in seq[seq.len() - known..].iter().enumerate() {
                x[s * d..(s + 1) * d].copy_from_slice(e);
            }
            let ctx = PlanContext {
                x,
                known,
                cond: condition_vector(a.profile.category, view.categories, a.profile.budget, view.budget_max),
                remaining: a.remaining() / a.profile.budget,
                end: plan_end(known, w, view.horizon - view.t),
            };
            let plan = best_of_n_plan(&self.ldm, &self.head, &self.weights, &ctx, self.candidates, subseed(episode_seed, ((view.t as u64) << 8) | i as u64))?;
            history.plans += 1;
            let c = ContextVector::new(view, i);
            let x_t = &plan.x[(known - 1) * d..known * d];
            let x_next = &plan.x[known * d..(known + 1) * d];
            for (k, id, value) in exposed {
                let bid = if plan.fallback {
                    0.0
                } else {
                    let row = g.io_node(k);
                    let f = &nodes[row * d..(row + 1) * d];
                    let b = self.idm.predict(x_t, x_next, f, value, &c)?;
                    if hard_budget { b.min(a.remaining().max(0.0)) } else { b }
                };
                bids.push(Bid { agent: i, io: id, bid });
            }
            if plan.fallback {
                history.fallbacks += 1;
            }
        }
        Ok(bids)
    }
}

/// CSV of rejection-sampling rounds.
pub fn write_round_log<W: Write>(mut out: W, rounds: &[RaftRound]) -> Result<()> {
    writeln!(out, "round,mean_score,kept_fraction,{}", KPI_NAMES.map(|k| format!("mean_{k}")).join(","))?;
    for r in rounds {
        let kpis: Vec<String> = r.kpi_means.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{},{:.6},{:.6},{}", r.round, r.mean_score, r.kept_fraction, kpis.join(","))?;
    }
    Ok(())
}

/// Config used when the planner controls agents; budgets become hard.
pub fn evaluation_config(auction: &AuctionConfig) -> AuctionConfig {
    AuctionConfig { hard_budget: true, ..auction.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(pred: &[f32], target: &[f32], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[1, pred.len()], pred.to_vec()).unwrap());
        let l = expectile_loss(&mut tape, p, &Tensor::new(&[1, target.len()], target.to_vec()).unwrap(), tau).unwrap();
        tape.scalar(l) as f64
    }

    #[test]
    fn expectile_closed_forms() {
        assert_eq!(loss_of(&[1.0, 2.0], &[1.0, 2.0], 0.7), 0.0);
        let mse = (0.25 + 4.0) / 2.0;
        assert!((loss_of(&[0.5, -1.0], &[0.0, 1.0], 0.5) - 0.5 * mse).abs() < 1e-7);
        assert!((loss_of(&[0.0], &[1.0], 0.7) - 0.7).abs() < 1e-7);
        assert!((loss_of(&[0.0], &[-1.0], 0.7) - 0.3).abs() < 1e-7);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        assert!(expectile_loss(&mut tape, p, &Tensor::new(&[1, 1], vec![0.0]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn weights_need_a_nonzero_entry() {
        assert!(KpiWeights([0.0; 5]).validate().is_err());
        assert!(KpiWeights([0.0, -1.0, 0.0, 0.0, 0.0]).validate().is_ok());
    }

    #[test]
    fn return_only_weights_give_normalized_return() {
        let stats = NormStats { mean: [0.0; OUTPUTS], std: [2.0; OUTPUTS] };
        let z = [0.4, 9.0, 9.0, 9.0, 9.0, 9.0];
        assert_eq!(weighted_score(&z, &KpiWeights([1.0, 0.0, 0.0, 0.0, 0.0]), &stats), (0.4, 0));
        let flat = NormStats { std: [0.0, 1.0, 1.0, 1.0, 1.0, 1.0], ..stats };
        assert_eq!(weighted_score(&z, &KpiWeights([1.0, 1.0, 0.0, 0.0, 0.0]), &flat), (9.0, 1));
    }

    #[test]
    fn keep_arithmetic() {
        assert_eq!(keep_count(32, 0.25), 8);
        assert_eq!(keep_count(32, 1.0), 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores: Vec<(u64, f64)> = (0..32).map(|i| (i, (i as f64 * 7.0) % 11.0)).collect();
        let kept = select_kept(&scores, 0.25, &mut rng);
        assert_eq!(kept.len(), 8);
        let min_kept = kept.iter().map(|&i| scores[i as usize].1).fold(f64::INFINITY, f64::min);
        assert!(scores.iter().filter(|s| !kept.contains(&s.0)).all(|s| s.1 <= min_kept));
        let flat: Vec<(u64, f64)> = (0..32).map(|i| (i, 1.0)).collect();
        assert_eq!(select_kept(&flat, 0.25, &mut rng).len(), 8);
    }

    #[test]
    fn selection_prefers_feasible_then_score() {
        let ctx = PlanContext { x: vec![0.0; 4], known: 1, cond: vec![], remaining: 1.0, end: 1 };
        let c = |id, score, feasible| PlanCandidate { id, x: vec![], score, feasible, fallback: false, kpis: [0.0; OUTPUTS] };
        let best = select_plan(vec![c(0, 5.0, false), c(1, 1.0, true), c(2, 3.0, true), c(3, 3.0, true)], &ctx, 9);
        assert_eq!(best.id, 2);
        let none = select_plan(vec![c(0, 5.0, false)], &ctx, 9);
        assert!(none.fallback && !none.feasible);
        assert_eq!(select_plan(vec![c(4, -2.0, true)], &ctx, 9).id, 4);
    }

    #[test]
    fn plan_end_stays_in_horizon() {
        assert_eq!(plan_end(4, 8, 10), 7);
        assert_eq!(plan_end(4, 8, 1), 4);
        assert_eq!(plan_end(1, 8, 3), 3);
    }
}
