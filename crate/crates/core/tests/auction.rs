mod common;

use bidlab_core::auction::{
    allocate_and_price, compute_kpis, generate_ios, AllocationRule, AuctionConfig, AuctionEnv,
};
use bidlab_core::bidders::{simulate_episode, BidderConfig};
use common::{mechanism_oracle, run_script, scripted_episodes};
use proptest::prelude::*;

fn rule_strategy() -> impl Strategy<Value = AllocationRule> {
    prop_oneof![Just(AllocationRule::Fpa), Just(AllocationRule::Gsp), Just(AllocationRule::Vcg)]
}

fn profile_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec(0.0f64..10.0, 1..7).prop_map(|b| b.into_iter().enumerate().collect())
}

proptest! {
    #[test]
    fn continuous_bids_match_oracle(bids in profile_strategy(), slots in 1usize..4, rule in rule_strategy()) {
        let got = allocate_and_price(&bids, slots, rule).unwrap();
        let want = mechanism_oracle(&bids, slots, rule);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g.agent, w.agent);
            prop_assert!((g.price - w.price).abs() < 1e-9, "{:?} vs {:?}", g, w);
        }
    }

    #[test]
    fn prices_never_exceed_bids(bids in profile_strategy(), slots in 1usize..4, rule in rule_strategy()) {
        let got = allocate_and_price(&bids, slots, rule).unwrap();
        prop_assert!(got.len() <= slots);
        for p in got {
            prop_assert!(p.price >= 0.0);
            prop_assert!(p.price <= p.bid);
            if rule == AllocationRule::Fpa {
                prop_assert_eq!(p.price, p.bid);
            }
        }
    }

    #[test]
    fn hard_budget_is_never_exceeded(seed in 0u64..10_000, rule in rule_strategy()) {
        let auction = AuctionConfig { hard_budget: true, budget_min: 3.0, budget_max: 8.0, rule, ..AuctionConfig::default() };
        let bidders = BidderConfig { alpha_min: 1.0, alpha_max: 3.0, ..BidderConfig::default() };
        let ep = simulate_episode(&auction, &bidders, seed).unwrap();
        let budgets: Vec<f64> = ep.profiles.iter().map(|p| p.budget).collect();
        let kpis = compute_kpis(&ep, &budgets);
        prop_assert_eq!(kpis.aggregate.budget_adherence, 1.0);
        for (a, b) in kpis.agents.iter().zip(&budgets) {
            prop_assert!(a.cost <= *b + 1e-9);
        }
    }

    #[test]
    fn welfare_is_sum_of_returns(seed in 0u64..10_000) {
        let ep = simulate_episode(&AuctionConfig::default(), &BidderConfig::default(), seed).unwrap();
        let budgets: Vec<f64> = ep.profiles.iter().map(|p| p.budget).collect();
        let k = compute_kpis(&ep, &budgets);
        prop_assert_eq!(k.social_welfare, k.agents.iter().map(|a| a.ret).sum::<f64>());
        for a in &k.agents {
            prop_assert!((0.0..=1.0).contains(&a.win_rate));
        }
        prop_assert!((0.0..=1.0).contains(&k.aggregate.budget_adherence));
    }

    #[test]
    fn cumulative_cost_is_sum_of_step_costs(seed in 0u64..10_000) {
        let ep = simulate_episode(&AuctionConfig::default(), &BidderConfig::default(), seed).unwrap();
        for i in 0..ep.n_agents() {
            let summed: f64 = ep.steps.iter().map(|s| s.outcome.agents[i].cost).sum();
            prop_assert!((summed - ep.cum_cost[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn io_invariants_hold(seed in 0u64..10_000) {
        let cfg = AuctionConfig::default();
        for (t, step) in generate_ios(&cfg, seed).unwrap().iter().enumerate() {
            for io in step {
                prop_assert_eq!(io.t_start, t);
                prop_assert!(io.t_start <= io.t_end && io.t_end < cfg.horizon);
                prop_assert!(!io.values.is_empty());
                prop_assert!(io.slots >= 1 && io.slots <= io.values.len());
                prop_assert!(io.values.iter().all(|v| v.1 >= 0.0));
            }
        }
    }
}

#[test]
fn scripted_ledgers_match() {
    for (name, script, ledger) in scripted_episodes() {
        let ep = run_script(&script);
        let k = compute_kpis(&ep, &script.budgets);
        for i in 0..script.budgets.len() {
            let a = &k.agents[i];
            assert_eq!(a.cost, ledger.cost[i], "{name}: cost of agent {i}");
            assert_eq!(a.ret, ledger.ret[i], "{name}: return of agent {i}");
            assert_eq!(a.wins, ledger.wins[i], "{name}: wins of agent {i}");
            assert_eq!(a.bids, ledger.bids[i], "{name}: bids of agent {i}");
        }
        assert_eq!(k.social_welfare, ledger.ret.iter().sum::<f64>(), "{name}");
    }
}

#[test]
fn scripted_ratios() {
    let eps = scripted_episodes();
    let kpis = |i: usize| {
        let (_, s, _) = &eps[i];
        compute_kpis(&run_script(s), &s.budgets)
    };
    // Cost 2, return 4.
    let a = kpis(0).agents[0];
    assert_eq!((a.cpa, a.roi, a.win_rate), (0.5, 1.0, 1.0));
    // One win from two positive bids, within budget.
    let a = kpis(4).agents[0];
    assert_eq!((a.win_rate, a.budget_adherence), (0.5, 1.0));
    // Same bids without the hard budget overspend 4 > 3.
    let k = kpis(5);
    assert_eq!(k.agents[0].budget_adherence, 0.0);
    assert_eq!(k.aggregate.budget_adherence, 0.0);
    // Cost 3 for return 1.
    let a = kpis(7).agents[0];
    assert_eq!(a.cpa, 3.0);
    assert!((a.roi + 2.0 / 3.0).abs() < 1e-15);
    // Paid for nothing.
    let a = kpis(8).agents[0];
    assert_eq!((a.cpa, a.roi), (f64::INFINITY, -1.0));
    // Free win: cpa 0 and roi 0 by convention.
    let a = kpis(9).agents[0];
    assert_eq!((a.cost, a.cpa, a.roi), (0.0, 0.0, 0.0));
}

#[test]
fn episodes_are_byte_identical_per_seed() {
    let cfg = AuctionConfig::default();
    let b = BidderConfig::default();
    let a = simulate_episode(&cfg, &b, 42).unwrap().to_json_line().unwrap();
    let c = simulate_episode(&cfg, &b, 42).unwrap().to_json_line().unwrap();
    assert_eq!(a, c);
    let d = simulate_episode(&cfg, &b, 43).unwrap().to_json_line().unwrap();
    assert_ne!(a, d);
}

#[test]
fn stepping_finished_episode_is_an_error() {
    let cfg = AuctionConfig { horizon: 1, arrival_rate: 0.0, ..AuctionConfig::default() };
    let mut env = AuctionEnv::new(&cfg, 1).unwrap();
    env.step(&[]).unwrap();
    assert!(env.done());
    assert!(env.step(&[]).is_err());
}
