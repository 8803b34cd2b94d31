#![allow(dead_code)]

use bidlab_core::auction::{
    run_episode, AgentProfile, AgentState, AllocationRule, AuctionConfig, AuctionEnv, Bid, EpisodeRecord,
    ImpressionOpportunity, Placement, StepView,
};
use bidlab_core::numkit::{
    grad_check, grad_check_params, Conv1d, EdgeIndex, GraphAttention, LayerNorm, Linear, MultiHeadAttention, ParamStore,
    Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Welfare of the best allocation of `slots` identical slots among `agents`,
/// found by trying every subset.
fn best_welfare(bids: &[(usize, f64)], agents: &[usize], slots: usize) -> f64 {
    let n = agents.len();
    let mut best = 0.0;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > slots {
            continue;
        }
        let w: f64 = (0..n)
            .filter(|j| mask & (1 << j) != 0)
            .map(|j| bids.iter().find(|b| b.0 == agents[j]).unwrap().1)
            .sum();
        if w > best {
            best = w;
        }
    }
    best
}

/// Agent `a` beats `b` when it bids more, or the same with a lower id.
fn beats(a: (usize, f64), b: (usize, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Allocation and prices derived without sorting: a positive bidder wins when
/// fewer than `slots` bidders beat it; GSP charges the best bid it beats; VCG
/// charges the welfare loss its presence imposes on everyone else.
pub fn mechanism_oracle(bids: &[(usize, f64)], slots: usize, rule: AllocationRule) -> Vec<Placement> {
    let mut winners: Vec<(usize, Placement)> = Vec::new();
    for &me in bids {
        if me.1 <= 0.0 {
            continue;
        }
        let above = bids.iter().filter(|&&o| o.0 != me.0 && beats(o, me)).count();
        if above >= slots {
            continue;
        }
        let price = match rule {
            AllocationRule::Fpa => me.1,
            AllocationRule::Gsp => bids
                .iter()
                .filter(|&&o| o.0 != me.0 && beats(me, o))
                .map(|o| o.1)
                .fold(0.0, f64::max),
            AllocationRule::Vcg => {
                let all: Vec<usize> = bids.iter().filter(|b| b.1 > 0.0).map(|b| b.0).collect();
                let others: Vec<usize> = all.iter().copied().filter(|&a| a != me.0).collect();
                let without = best_welfare(bids, &others, slots);
                let with_me = best_welfare(bids, &all, slots) - me.1;
                without - with_me
            }
        };
        winners.push((above, Placement { agent: me.0, bid: me.1, price }));
    }
    winners.sort_by_key(|w| w.0);
    winners.into_iter().map(|w| w.1).collect()
}

/// Hand-written episode: IOs, budgets and the bids submitted at each step.
pub struct Script {
    pub rule: AllocationRule,
    pub hard_budget: bool,
    pub budgets: Vec<f64>,
    pub ios: Vec<ImpressionOpportunity>,
    pub bids: Vec<Vec<Bid>>,
}

/// Expected per-agent totals for a script.
pub struct Ledger {
    pub cost: Vec<f64>,
    pub ret: Vec<f64>,
    pub wins: Vec<u64>,
    pub bids: Vec<u64>,
}

pub fn io(id: u64, t_start: usize, t_end: usize, slots: usize, values: &[(usize, f64)]) -> ImpressionOpportunity {
    ImpressionOpportunity { id, t_start, t_end, slots, base_value: 1.0, values: values.to_vec() }
}

pub fn bid(agent: usize, io: u64, bid: f64) -> Bid {
    Bid { agent, io, bid }
}

pub fn run_script(s: &Script) -> EpisodeRecord {
    let horizon = s.bids.len();
    let config = AuctionConfig {
        agents: s.budgets.len(),
        horizon,
        rule: s.rule,
        hard_budget: s.hard_budget,
        categories: 1,
        ..AuctionConfig::default()
    };
    let mut arrivals = vec![Vec::new(); horizon];
    for io in &s.ios {
        arrivals[io.t_start].push(io.clone());
    }
    let profiles = s
        .budgets
        .iter()
        .enumerate()
        .map(|(id, &budget)| AgentProfile { id, category: 0, budget, cpa_target: None })
        .collect();
    let env = AuctionEnv::with_parts(&config, 0, profiles, arrivals);
    let scripted = s.bids.clone();
    run_episode(env, Vec::new(), move |view| Ok(scripted[view.t].clone())).expect("scripted episode runs")
}

/// Ten small episodes with totals worked out by hand.
pub fn scripted_episodes() -> Vec<(&'static str, Script, Ledger)> {
    use AllocationRule::*;
    vec![
        (
            "fpa single slot",
            Script {
                rule: Fpa,
                hard_budget: false,
                budgets: vec![10.0, 10.0],
                ios: vec![io(0, 0, 0, 1, &[(0, 4.0), (1, 3.0)])],
                bids: vec![vec![bid(0, 0, 2.0), bid(1, 0, 1.0)]],
            },
            Ledger { cost: vec![2.0, 0.0], ret: vec![4.0, 0.0], wins: vec![1, 0], bids: vec![1, 1] },
        ),
        (
            "gsp two slots",
            Script {
                rule: Gsp,
                hard_budget: false,
                budgets: vec![10.0; 3],
                ios: vec![io(0, 0, 0, 2, &[(0, 5.0), (1, 4.0), (2, 3.0)])],
                bids: vec![vec![bid(0, 0, 5.0), bid(1, 0, 3.0), bid(2, 0, 2.0)]],
            },
            Ledger { cost: vec![3.0, 2.0, 0.0], ret: vec![5.0, 4.0, 0.0], wins: vec![1, 1, 0], bids: vec![1, 1, 1] },
        ),
        (
            "vcg two slots",
            Script {
                rule: Vcg,
                hard_budget: false,
                budgets: vec![10.0; 3],
                ios: vec![io(0, 0, 0, 2, &[(0, 5.0), (1, 4.0), (2, 3.0)])],
                bids: vec![vec![bid(0, 0, 5.0), bid(1, 0, 3.0), bid(2, 0, 2.0)]],
            },
            Ledger { cost: vec![2.0, 2.0, 0.0], ret: vec![5.0, 4.0, 0.0], wins: vec![1, 1, 0], bids: vec![1, 1, 1] },
        ),
        (
            "fpa two steps with a carried-over io",
            Script {
                rule: Fpa,
                hard_budget: false,
                budgets: vec![10.0, 10.0],
                ios: vec![io(0, 0, 1, 1, &[(0, 2.0), (1, 2.0)]), io(1, 1, 1, 1, &[(1, 3.0)])],
                bids: vec![
                    vec![bid(0, 0, 1.0), bid(1, 0, 1.5)],
                    vec![bid(0, 0, 1.0), bid(1, 0, 0.0), bid(1, 1, 2.5)],
                ],
            },
            Ledger { cost: vec![1.0, 4.0], ret: vec![2.0, 5.0], wins: vec![1, 2], bids: vec![2, 2] },
        ),
        (
            "hard budget suppresses the second win",
            Script {
                rule: Fpa,
                hard_budget: true,
                budgets: vec![3.0],
                ios: vec![io(0, 0, 0, 1, &[(0, 4.0)]), io(1, 1, 1, 1, &[(0, 4.0)])],
                bids: vec![vec![bid(0, 0, 2.0)], vec![bid(0, 1, 2.0)]],
            },
            Ledger { cost: vec![2.0], ret: vec![4.0], wins: vec![1], bids: vec![2] },
        ),
        (
            "soft budget allows overspend",
            Script {
                rule: Fpa,
                hard_budget: false,
                budgets: vec![3.0],
                ios: vec![io(0, 0, 0, 1, &[(0, 4.0)]), io(1, 1, 1, 1, &[(0, 4.0)])],
                bids: vec![vec![bid(0, 0, 2.0)], vec![bid(0, 1, 2.0)]],
            },
            Ledger { cost: vec![4.0], ret: vec![8.0], wins: vec![2], bids: vec![2] },
        ),
        (
            "all zero bids",
            Script {
                rule: Gsp,
                hard_budget: false,
                budgets: vec![5.0, 5.0],
                ios: vec![io(0, 0, 0, 2, &[(0, 1.0), (1, 1.0)])],
                bids: vec![vec![bid(0, 0, 0.0), bid(1, 0, 0.0)]],
            },
            Ledger { cost: vec![0.0, 0.0], ret: vec![0.0, 0.0], wins: vec![0, 0], bids: vec![0, 0] },
        ),
        (
            "tie goes to the lower id",
            Script {
                rule: Fpa,
                hard_budget: false,
                budgets: vec![5.0, 5.0],
                ios: vec![io(0, 0, 0, 1, &[(0, 1.0), (1, 5.0)])],
                bids: vec![vec![bid(0, 0, 3.0), bid(1, 0, 3.0)]],
            },
            Ledger { cost: vec![3.0, 0.0], ret: vec![1.0, 0.0], wins: vec![1, 0], bids: vec![1, 1] },
        ),
        (
            "worthless win",
            Script {
                rule: Fpa,
                hard_budget: false,
                budgets: vec![5.0],
                ios: vec![io(0, 0, 0, 1, &[(0, 0.0)])],
                bids: vec![vec![bid(0, 0, 1.0)]],
            },
            Ledger { cost: vec![1.0], ret: vec![0.0], wins: vec![1], bids: vec![1] },
        ),
        (
            "gsp with no runner-up pays nothing",
            Script {
                rule: Gsp,
                hard_budget: false,
                budgets: vec![10.0; 3],
                ios: vec![io(0, 0, 0, 1, &[(0, 2.0), (1, 2.0), (2, 2.0)]), io(1, 1, 1, 1, &[(0, 3.0), (2, 1.0)])],
                bids: vec![
                    vec![bid(0, 0, 1.0), bid(1, 0, 4.0), bid(2, 0, 2.0)],
                    vec![bid(0, 1, 3.0), bid(2, 1, 0.0)],
                ],
            },
            Ledger { cost: vec![0.0, 2.0, 0.0], ret: vec![3.0, 2.0, 0.0], wins: vec![1, 1, 0], bids: vec![2, 1, 1] },
        ),
    ]
}

/// Step view with `ios` live IOs, each exposed to every agent with probability `p_expose`.
pub fn random_view(agents: usize, ios: usize, p_expose: f64, seed: u64) -> StepView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live = (0..ios as u64)
        .map(|id| {
            let mut values = Vec::new();
            for a in 0..agents {
                if rng.random_bool(p_expose) {
                    values.push((a, rng.random_range(0.1..4.0)));
                }
            }
            if values.is_empty() {
                values.push((rng.random_range(0..agents), 1.0));
            }
            ImpressionOpportunity { id: id * 3 + 1, t_start: 0, t_end: 2, slots: 1, base_value: 1.0, values }
        })
        .collect();
    StepView {
        t: 1,
        horizon: 8,
        max_slots: 2,
        categories: 3,
        budget_max: 20.0,
        live,
        agents: (0..agents)
            .map(|id| AgentState {
                profile: AgentProfile { id, category: id % 3, budget: 10.0 + id as f64, cpa_target: None },
                cum_cost: 0.3 * id as f64,
                cum_value: 0.5,
            })
            .collect(),
        last_live: Vec::new(),
        last_bids: Vec::new(),
        last_outcome: None,
    }
}

const EPS: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random projection of the output so every entry gets a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> bidlab_core::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::randn(&shape, &mut rng(seed)));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

/// Worst relative gradient error over every layer type at three shapes each.
pub fn worst_layer_grad_error() -> f64 {
    let mut worst: f64 = 0.0;

    for (i, &(rows, fan_in, fan_out)) in [(1, 3, 2), (4, 5, 3), (7, 2, 6)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let layer = Linear::new(&mut store, "lin", fan_in, fan_out, &mut rng(i as u64));
        let x = Tensor::randn(&[rows, fan_in], &mut rng(100 + i as u64));
        let err = grad_check_params(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = layer.forward(t, p, xv)?;
                project(t, y, 7)
            },
            &store,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }

    for (i, &(c_in, c_out, k, len)) in [(1, 1, 1, 4), (2, 3, 3, 8), (3, 2, 5, 6)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let layer = Conv1d::new(&mut store, "conv", c_in, c_out, k, &mut rng(i as u64)).unwrap();
        // Non-zero bias so its gradient path is exercised too.
        store.get_mut(layer.b).data_mut().iter_mut().for_each(|b| *b = 0.3);
        let x = Tensor::randn(&[c_in, len], &mut rng(200 + i as u64));
        let err = grad_check_params(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = layer.forward(t, p, xv)?;
                project(t, y, 8)
            },
            &store,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
        let err_x = grad_check(
            |t, xv| {
                let p = t.bind_frozen(&store);
                let y = layer.forward(t, &p, xv)?;
                project(t, y, 8)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err_x);
    }

    for (i, &(rows, dim)) in [(1, 2), (3, 4), (5, 7)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let layer = LayerNorm::new(&mut store, "ln", dim);
        store.get_mut(layer.gamma).data_mut().iter_mut().enumerate().for_each(|(j, g)| *g = 1.0 + 0.1 * j as f64);
        let x = Tensor::randn(&[rows, dim], &mut rng(300 + i as u64));
        let err = grad_check(
            |t, xv| {
                let p = t.bind_frozen(&store);
                let y = layer.forward(t, &p, xv)?;
                project(t, y, 9)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
        let err_p = grad_check_params(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = layer.forward(t, p, xv)?;
                project(t, y, 9)
            },
            &store,
            EPS,
        )
        .unwrap();
        worst = worst.max(err_p);
    }

    for (i, &(seq, dim, heads)) in [(1, 2, 1), (3, 4, 2), (5, 6, 3)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let layer = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut rng(i as u64)).unwrap();
        let x = Tensor::randn(&[seq, dim], &mut rng(400 + i as u64));
        let err = grad_check_params(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = layer.forward(t, p, xv)?;
                project(t, y, 10)
            },
            &store,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
        let err_x = grad_check(
            |t, xv| {
                let p = t.bind_frozen(&store);
                let y = layer.forward(t, &p, xv)?;
                project(t, y, 10)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err_x);
    }

    let graphs: [(usize, usize, usize, Vec<(usize, usize)>); 3] = [
        (2, 3, 2, vec![(0, 1)]),
        (4, 3, 4, vec![(0, 1), (1, 2), (2, 3), (0, 3)]),
        (5, 4, 3, vec![(0, 1), (0, 2), (0, 3), (0, 4), (2, 4)]),
    ];
    for (i, (nodes, fan_in, fan_out, pairs)) in graphs.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let layer = GraphAttention::new(&mut store, "gat", *fan_in, *fan_out, &mut rng(i as u64));
        let edges = EdgeIndex::undirected(pairs);
        let h = Tensor::randn(&[*nodes, *fan_in], &mut rng(500 + i as u64));
        let err = grad_check_params(
            |t, p| {
                let hv = t.constant(h.clone());
                let (y, _) = layer.forward(t, p, hv, &edges)?;
                project(t, y, 11)
            },
            &store,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }

    worst
}

