use serde::{Deserialize, Serialize};

use super::record::EpisodeRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentKpi {
    pub cost: f64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub cpa: f64,
    pub roi: f64,
    pub win_rate: f64,
    pub budget_adherence: f64,
    pub wins: u64,
    pub bids: u64,
}

impl AgentKpi {
    pub fn from_totals(cost: f64, ret: f64, wins: u64, bids: u64, within_budget: bool) -> Self {
        Self {
            cost,
            ret,
            cpa: cpa(cost, ret),
            roi: roi(cost, ret),
            win_rate: if bids == 0 { 0.0 } else { wins as f64 / bids as f64 },
            budget_adherence: if within_budget { 1.0 } else { 0.0 },
            wins,
            bids,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub agents: Vec<AgentKpi>,
    /// Pooled over agents: summed cost, return, wins and bids.
    pub aggregate: AgentKpi,
    pub social_welfare: f64,
}

pub fn cpa(cost: f64, ret: f64) -> f64 {
    if ret > 0.0 {
        cost / ret
    } else if cost > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

pub fn roi(cost: f64, ret: f64) -> f64 {
    if cost > 0.0 {
        (ret - cost) / cost
    } else {
        0.0
    }
}

pub fn compute_kpis(episode: &EpisodeRecord, budgets: &[f64]) -> KpiReport {
    let n = episode.n_agents();
    let mut cost = vec![0.0; n];
    let mut ret = vec![0.0; n];
    let mut wins = vec![0u64; n];
    let mut bids = vec![0u64; n];
    for s in &episode.steps {
        for (i, a) in s.outcome.agents.iter().enumerate() {
            cost[i] += a.cost;
            ret[i] += a.value;
            wins[i] += a.wins as u64;
            bids[i] += a.bids as u64;
        }
    }
    let agents: Vec<AgentKpi> = (0..n)
        .map(|i| {
            // The environment's running total is what its budget check saw.
            let spent = episode.cum_cost.get(i).copied().unwrap_or(cost[i]);
            AgentKpi::from_totals(cost[i], ret[i], wins[i], bids[i], spent <= budgets[i])
        })
        .collect();
    let social_welfare = agents.iter().map(|a| a.ret).sum();
    let mut aggregate = AgentKpi::from_totals(
        cost.iter().sum(),
        ret.iter().sum(),
        wins.iter().sum(),
        bids.iter().sum(),
        true,
    );
    aggregate.budget_adherence = adherence(&agents);
    KpiReport { agents, aggregate, social_welfare }
}

/// Fraction of agent entries whose cost stayed within budget.
pub fn adherence(agents: &[AgentKpi]) -> f64 {
    if agents.is_empty() {
        return 1.0;
    }
    agents.iter().map(|a| a.budget_adherence).sum::<f64>() / agents.len() as f64
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
