use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::config::AuctionConfig;
use super::mechanism::{allocate_and_price, Placement};
use crate::error::{Error, Result};

/// Derive an independent stream seed from an episode seed.
pub fn subseed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_IOS: u64 = 1;
pub(crate) const STREAM_PROFILES: u64 = 2;
pub(crate) const STREAM_STRATEGIES: u64 = 3;
pub(crate) const STREAM_CONVERSIONS: u64 = 4;

/// A bid-able item. `values` holds one entry per exposed agent, sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionOpportunity {
    pub id: u64,
    pub t_start: usize,
    pub t_end: usize,
    pub slots: usize,
    pub base_value: f64,
    pub values: Vec<(usize, f64)>,
}

impl ImpressionOpportunity {
    pub fn is_live(&self, t: usize) -> bool {
        self.t_start <= t && t <= self.t_end
    }

    pub fn exposed(&self, agent: usize) -> bool {
        self.values.binary_search_by_key(&agent, |v| v.0).is_ok()
    }

    pub fn value_for(&self, agent: usize) -> Option<f64> {
        self.values.binary_search_by_key(&agent, |v| v.0).ok().map(|i| self.values[i].1)
    }

    pub fn exposure(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().map(|v| v.0)
    }

    /// Fraction of the lifecycle already elapsed at step `t`.
    pub fn phase(&self, t: usize) -> f64 {
        let len = (self.t_end - self.t_start + 1) as f64;
        (t.saturating_sub(self.t_start)) as f64 / len
    }
}

/// Arrivals for every step of an episode, deterministic in `seed`.
pub fn generate_ios(config: &AuctionConfig, seed: u64) -> Result<Vec<Vec<ImpressionOpportunity>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, STREAM_IOS));
    let poisson = if config.arrival_rate > 0.0 {
        Some(Poisson::new(config.arrival_rate).map_err(|e| Error::Config(format!("arrival rate: {e}")))?)
    } else {
        None
    };
    let life = Geometric::new(1.0 / config.lifecycle_mean)
        .map_err(|e| Error::Config(format!("lifecycle distribution: {e}")))?;
    let base = LogNormal::new(config.base_value_mu, config.base_value_sigma)
        .map_err(|e| Error::Config(format!("base value distribution: {e}")))?;
    let mult = LogNormal::new(0.0, config.agent_value_sigma)
        .map_err(|e| Error::Config(format!("agent value distribution: {e}")))?;
    let mut next_id = 0u64;
    let mut out = Vec::with_capacity(config.horizon);
    for t in 0..config.horizon {
        let n = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut step = Vec::with_capacity(n);
        for _ in 0..n {
            let len = 1 + life.sample(&mut rng) as usize;
            let t_end = (t + len - 1).min(config.horizon - 1);
            let mut exposure: Vec<usize> =
                (0..config.agents).filter(|_| rng.random_bool(config.exposure_prob)).collect();
            if exposure.is_empty() {
                exposure.push(rng.random_range(0..config.agents));
            }
            let slots = rng.random_range(1..=config.max_slots).min(exposure.len());
            let base_value = base.sample(&mut rng);
            let values = exposure.into_iter().map(|a| (a, base_value * mult.sample(&mut rng))).collect();
            step.push(ImpressionOpportunity { id: next_id, t_start: t, t_end, slots, base_value, values });
            next_id += 1;
        }
        out.push(step);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: usize,
    pub category: usize,
    pub budget: f64,
    pub cpa_target: Option<f64>,
}

pub fn generate_profiles(config: &AuctionConfig, seed: u64) -> Vec<AgentProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, STREAM_PROFILES));
    (0..config.agents)
        .map(|id| AgentProfile {
            id,
            category: rng.random_range(0..config.categories),
            budget: if config.budget_max > config.budget_min {
                rng.random_range(config.budget_min..config.budget_max)
            } else {
                config.budget_min
            },
            cpa_target: None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub agent: usize,
    pub io: u64,
    pub bid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoOutcome {
    pub io: u64,
    pub winners: Vec<Placement>,
}

/// Per-agent results of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub cost: f64,
    pub value: f64,
    pub wins: u32,
    /// Positive bids submitted (before any budget suppression).
    pub bids: u32,
    pub suppressed: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub ios: Vec<IoOutcome>,
    pub agents: Vec<AgentStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub profile: AgentProfile,
    pub cum_cost: f64,
    pub cum_value: f64,
}

impl AgentState {
    pub fn remaining(&self) -> f64 {
        self.profile.budget - self.cum_cost
    }
}

/// Snapshot of the environment at the start of a step, before bidding.
#[derive(Clone, Debug, PartialEq)]
pub struct StepView {
    pub t: usize,
    pub horizon: usize,
    pub max_slots: usize,
    pub categories: usize,
    pub budget_max: f64,
    pub live: Vec<ImpressionOpportunity>,
    pub agents: Vec<AgentState>,
    /// Live IOs, bids and outcome of the previous step (empty at `t = 0`).
    pub last_live: Vec<ImpressionOpportunity>,
    pub last_bids: Vec<Bid>,
    pub last_outcome: Option<StepOutcome>,
}

impl StepView {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// `(agent, io index in live, value)` for every exposed pair.
    pub fn exposed_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (k, io) in self.live.iter().enumerate() {
            for &(a, v) in &io.values {
                out.push((a, k, v));
            }
        }
        out
    }
}

/// Sequential multi-agent auction episode.
#[derive(Clone, Debug)]
pub struct AuctionEnv {
    config: AuctionConfig,
    seed: u64,
    profiles: Vec<AgentProfile>,
    arrivals: Vec<Vec<ImpressionOpportunity>>,
    t: usize,
    live: Vec<ImpressionOpportunity>,
    cum_cost: Vec<f64>,
    cum_value: Vec<f64>,
    last_live: Vec<ImpressionOpportunity>,
    last_bids: Vec<Bid>,
    last_outcome: Option<StepOutcome>,
    conv_rng: ChaCha8Rng,
}

impl AuctionEnv {
    pub fn new(config: &AuctionConfig, seed: u64) -> Result<Self> {
        let arrivals = generate_ios(config, seed)?;
        let profiles = generate_profiles(config, seed);
        Ok(Self::with_parts(config, seed, profiles, arrivals))
    }

    pub fn with_parts(
        config: &AuctionConfig,
        seed: u64,
        profiles: Vec<AgentProfile>,
        arrivals: Vec<Vec<ImpressionOpportunity>>,
    ) -> Self {
        let n = profiles.len();
        let live = arrivals.first().cloned().unwrap_or_default();
        Self {
            config: config.clone(),
            seed,
            profiles,
            arrivals,
            t: 0,
            live,
            cum_cost: vec![0.0; n],
            cum_value: vec![0.0; n],
            last_live: Vec::new(),
            last_bids: Vec::new(),
            last_outcome: None,
            conv_rng: ChaCha8Rng::seed_from_u64(subseed(seed, STREAM_CONVERSIONS)),
        }
    }

    pub fn config(&self) -> &AuctionConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.horizon
    }

    pub fn profiles(&self) -> &[AgentProfile] {
        &self.profiles
    }

    pub fn arrivals(&self) -> &[Vec<ImpressionOpportunity>] {
        &self.arrivals
    }

    pub fn live(&self) -> &[ImpressionOpportunity] {
        &self.live
    }

    pub fn cum_cost(&self) -> &[f64] {
        &self.cum_cost
    }

    pub fn cum_value(&self) -> &[f64] {
        &self.cum_value
    }

    pub fn remaining(&self, agent: usize) -> f64 {
        self.profiles[agent].budget - self.cum_cost[agent]
    }

    pub fn view(&self) -> StepView {
        StepView {
            t: self.t,
            horizon: self.config.horizon,
            max_slots: self.config.max_slots,
            categories: self.config.categories,
            budget_max: self.config.budget_max,
            live: if self.done() { Vec::new() } else { self.live.clone() },
            agents: self
                .profiles
                .iter()
                .enumerate()
                .map(|(i, p)| AgentState { profile: p.clone(), cum_cost: self.cum_cost[i], cum_value: self.cum_value[i] })
                .collect(),
            last_live: self.last_live.clone(),
            last_bids: self.last_bids.clone(),
            last_outcome: self.last_outcome.clone(),
        }
    }

    pub fn step(&mut self, bids: &[Bid]) -> Result<StepOutcome> {
        self.step_with(bids, self.config.hard_budget)
    }

    /// Run every live IO's auction for the current step.
    ///
    /// `bids` must hold exactly one entry per live, exposed (agent, IO) pair.
    /// IOs are auctioned in id order; under `hard_budget` an agent whose
    /// remaining budget is below its bid bids zero on that IO.
    pub fn step_with(&mut self, bids: &[Bid], hard_budget: bool) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::Input("episode already finished".into()));
        }
        let n = self.profiles.len();
        let mut table: Vec<Vec<Option<f64>>> = self.live.iter().map(|io| vec![None; io.values.len()]).collect();
        for b in bids {
            let k = self
                .live
                .iter()
                .position(|io| io.id == b.io)
                .ok_or_else(|| Error::Input(format!("bid on IO {} which is not live at t={}", b.io, self.t)))?;
            let slot = self.live[k]
                .values
                .binary_search_by_key(&b.agent, |v| v.0)
                .map_err(|_| Error::Input(format!("agent {} is not exposed to IO {}", b.agent, b.io)))?;
            if !(b.bid >= 0.0) || !b.bid.is_finite() {
                return Err(Error::Input(format!("agent {} bid {} on IO {}", b.agent, b.bid, b.io)));
            }
            if table[k][slot].replace(b.bid).is_some() {
                return Err(Error::Input(format!("duplicate bid by agent {} on IO {}", b.agent, b.io)));
            }
        }
        let mut agents = vec![AgentStep::default(); n];
        let mut ios = Vec::with_capacity(self.live.len());
        let mut order: Vec<usize> = (0..self.live.len()).collect();
        order.sort_by_key(|&k| self.live[k].id);
        for k in order {
            let io = &self.live[k];
            let mut submitted = Vec::with_capacity(io.values.len());
            for (slot, &(agent, _)) in io.values.iter().enumerate() {
                let bid = table[k][slot]
                    .ok_or_else(|| Error::Input(format!("missing bid by agent {agent} on IO {}", io.id)))?;
                if bid > 0.0 {
                    agents[agent].bids += 1;
                }
                let effective = if hard_budget && self.cum_cost[agent] + bid > self.profiles[agent].budget {
                    if bid > 0.0 {
                        agents[agent].suppressed += 1;
                    }
                    0.0
                } else {
                    bid
                };
                submitted.push((agent, effective));
            }
            let winners = allocate_and_price(&submitted, io.slots, self.config.rule)?;
            for w in &winners {
                let value = io.value_for(w.agent).expect("winner is exposed");
                let earned = if self.config.stochastic_conversions {
                    if self.conv_rng.random_bool(self.config.conversion_prob) {
                        value / self.config.conversion_prob
                    } else {
                        0.0
                    }
                } else {
                    value
                };
                let a = &mut agents[w.agent];
                a.cost += w.price;
                a.value += earned;
                a.wins += 1;
                self.cum_cost[w.agent] += w.price;
                self.cum_value[w.agent] += earned;
            }
            ios.push(IoOutcome { io: io.id, winners });
        }
        let outcome = StepOutcome { ios, agents };
        self.last_live = std::mem::take(&mut self.live);
        self.last_bids = bids.to_vec();
        self.last_outcome = Some(outcome.clone());
        self.t += 1;
        if !self.done() {
            let t = self.t;
            self.live = self.last_live.iter().filter(|io| io.is_live(t)).cloned().collect();
            self.live.extend(self.arrivals[t].iter().cloned());
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::mechanism::AllocationRule;

    fn io(id: u64, values: &[(usize, f64)], slots: usize) -> ImpressionOpportunity {
        ImpressionOpportunity { id, t_start: 0, t_end: 0, slots, base_value: 1.0, values: values.to_vec() }
    }

    fn profiles(budgets: &[f64]) -> Vec<AgentProfile> {
        budgets
            .iter()
            .enumerate()
            .map(|(id, &budget)| AgentProfile { id, category: 0, budget, cpa_target: None })
            .collect()
    }

    #[test]
    fn zero_arrival_rate_gives_empty_stream() {
        let cfg = AuctionConfig { arrival_rate: 0.0, ..Default::default() };
        let s = generate_ios(&cfg, 3).unwrap();
        assert_eq!(s.len(), cfg.horizon);
        assert!(s.iter().all(|step| step.is_empty()));
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = AuctionConfig::default();
        assert_eq!(generate_ios(&cfg, 11).unwrap(), generate_ios(&cfg, 11).unwrap());
        assert_ne!(generate_ios(&cfg, 11).unwrap(), generate_ios(&cfg, 12).unwrap());
    }

    #[test]
    fn lifecycles_stay_inside_horizon_and_slots_fit_exposure() {
        let cfg = AuctionConfig { lifecycle_mean: 6.0, max_slots: 3, exposure_prob: 0.3, ..Default::default() };
        for seed in 0..5 {
            for (t, step) in generate_ios(&cfg, seed).unwrap().iter().enumerate() {
                for io in step {
                    assert_eq!(io.t_start, t);
                    assert!(io.t_start <= io.t_end && io.t_end < cfg.horizon);
                    assert!(!io.values.is_empty());
                    assert!(io.slots >= 1 && io.slots <= io.values.len());
                    assert!(io.values.windows(2).all(|w| w[0].0 < w[1].0));
                }
            }
        }
    }

    #[test]
    fn arrival_mean_within_three_sigma() {
        // Poisson(5) over 100 steps: the sample mean has sd sqrt(5/100).
        let cfg = AuctionConfig { arrival_rate: 5.0, horizon: 100, ..Default::default() };
        let s = generate_ios(&cfg, 2024).unwrap();
        let mean = s.iter().map(|x| x.len()).sum::<usize>() as f64 / 100.0;
        assert!((mean - 5.0).abs() < 3.0 * (5.0f64 / 100.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn all_zero_bids_produce_nothing() {
        let cfg = AuctionConfig { agents: 2, horizon: 1, ..Default::default() };
        let arrivals = vec![vec![io(0, &[(0, 1.0), (1, 2.0)], 1)]];
        let mut env = AuctionEnv::with_parts(&cfg, 0, profiles(&[10.0, 10.0]), arrivals);
        let out = env
            .step(&[Bid { agent: 0, io: 0, bid: 0.0 }, Bid { agent: 1, io: 0, bid: 0.0 }])
            .unwrap();
        assert!(out.ios[0].winners.is_empty());
        assert_eq!(env.cum_cost(), &[0.0, 0.0]);
        assert_eq!(env.cum_value(), &[0.0, 0.0]);
    }

    #[test]
    fn hard_budget_suppresses_unaffordable_bid() {
        let cfg = AuctionConfig { agents: 1, horizon: 1, ..Default::default() };
        let arrivals = vec![vec![io(0, &[(0, 3.0)], 1)]];
        let mut env = AuctionEnv::with_parts(&cfg, 0, profiles(&[1.0]), arrivals);
        let out = env.step_with(&[Bid { agent: 0, io: 0, bid: 5.0 }], true).unwrap();
        assert!(out.ios[0].winners.is_empty());
        assert_eq!(out.agents[0].suppressed, 1);
        assert_eq!(out.agents[0].bids, 1);
    }

    #[test]
    fn scripted_first_price_ledger() {
        // 2 agents, 3 IOs over two steps.
        let cfg = AuctionConfig { agents: 2, horizon: 2, rule: AllocationRule::Fpa, ..Default::default() };
        let mut a = io(0, &[(0, 2.0), (1, 1.5)], 1);
        a.t_end = 1;
        let b = io(1, &[(0, 1.0), (1, 3.0)], 1);
        let mut c = io(2, &[(1, 4.0)], 1);
        c.t_start = 1;
        c.t_end = 1;
        let mut env = AuctionEnv::with_parts(&cfg, 0, profiles(&[100.0, 100.0]), vec![vec![a, b], vec![c]]);
        env.step(&[
            Bid { agent: 0, io: 0, bid: 1.2 },
            Bid { agent: 1, io: 0, bid: 0.7 },
            Bid { agent: 0, io: 1, bid: 0.4 },
            Bid { agent: 1, io: 1, bid: 2.5 },
        ])
        .unwrap();
        env.step(&[
            Bid { agent: 0, io: 0, bid: 0.1 },
            Bid { agent: 1, io: 0, bid: 0.3 },
            Bid { agent: 1, io: 2, bid: 1.0 },
        ])
        .unwrap();
        // agent 0 wins IO0@t0 (1.2); agent 1 wins IO1@t0 (2.5), IO0@t1 (0.3), IO2@t1 (1.0)
        assert!((env.cum_cost()[0] - 1.2).abs() < 1e-12);
        assert!((env.cum_cost()[1] - 3.8).abs() < 1e-12);
        assert!((env.cum_value()[0] - 2.0).abs() < 1e-12);
        assert!((env.cum_value()[1] - (3.0 + 1.5 + 4.0)).abs() < 1e-12);
        assert!(env.done());
    }

    #[test]
    fn bid_on_non_exposed_io_is_rejected() {
        let cfg = AuctionConfig { agents: 2, horizon: 1, ..Default::default() };
        let arrivals = vec![vec![io(0, &[(0, 1.0)], 1)]];
        let mut env = AuctionEnv::with_parts(&cfg, 0, profiles(&[10.0, 10.0]), arrivals);
        let r = env.step(&[Bid { agent: 0, io: 0, bid: 1.0 }, Bid { agent: 1, io: 0, bid: 1.0 }]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn missing_bid_is_rejected() {
        let cfg = AuctionConfig { agents: 2, horizon: 1, ..Default::default() };
        let arrivals = vec![vec![io(0, &[(0, 1.0), (1, 1.0)], 1)]];
        let mut env = AuctionEnv::with_parts(&cfg, 0, profiles(&[10.0, 10.0]), arrivals);
        assert!(env.step(&[Bid { agent: 0, io: 0, bid: 1.0 }]).is_err());
    }
}
