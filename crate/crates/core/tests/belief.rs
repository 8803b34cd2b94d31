mod common;

use bidlab_core::auction::AuctionConfig;
use bidlab_core::belief::{build_belief_graph, kd_loss, own_view};
use bidlab_core::graph::FeatureSpec;
use bidlab_core::numkit::{Tape, Tensor};
use common::random_view;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> FeatureSpec {
    FeatureSpec::new(&AuctionConfig::default(), 4)
}

proptest! {
    #[test]
    fn every_known_io_has_one_role_per_pseudo_agent(
        agents in 1usize..5, ios in 0usize..25, h in 1usize..6, cap in 0usize..8, seed in 0u64..1000,
    ) {
        let view = random_view(agents, ios, 0.4, seed);
        let agent = seed as usize % agents;
        let b = build_belief_graph(&view, agent, &spec(), cap, h, 0.5, seed);
        let g = &b.graph;
        prop_assert_eq!(b.h, h);
        prop_assert_eq!(g.n_agents, 1 + h);
        let (exposed, sampled) = own_view(&view, agent, cap, seed);
        prop_assert_eq!(g.io_ids.len(), exposed.len() + sampled.len());
        prop_assert_eq!(g.n_nodes(), 2 + 2 * h + g.io_ids.len());
        for (k, id) in g.io_ids.iter().enumerate() {
            let node = g.io_node(k);
            prop_assert_eq!(g.has_edge(g.ve(0), node), exposed.contains(id));
            prop_assert_eq!(g.has_edge(g.vn(0), node), sampled.contains(id));
            for p in 0..h {
                prop_assert!(g.has_edge(b.pseudo_ve(p), node) ^ g.has_edge(b.pseudo_vn(p), node));
            }
        }
        // Deterministic in the seed.
        prop_assert_eq!(&b, &build_belief_graph(&view, agent, &spec(), cap, h, 0.5, seed));
    }

    #[test]
    fn kd_matches_elementwise_oracle(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut want = 0.0;
        for i in 0..rows * cols {
            want += (s[i] - t[i]) * (s[i] - t[i]);
        }
        want /= (rows * cols) as f64;
        let mut tape = Tape::<f64>::new();
        let sv = tape.leaf(Tensor::new(&[rows, cols], s).unwrap());
        let l = kd_loss(&mut tape, sv, &Tensor::new(&[rows, cols], t).unwrap()).unwrap();
        prop_assert!((tape.scalar(l) - want).abs() < 1e-7);
    }
}

#[test]
fn four_pseudo_subgraphs_and_empty_view() {
    let view = random_view(3, 0, 0.5, 1);
    let b = build_belief_graph(&view, 1, &spec(), 8, 4, 0.5, 1);
    assert_eq!(b.h, 4);
    assert_eq!(b.graph.n_nodes(), 2 + 2 * 4);
    assert!(b.graph.edges.is_empty());
}

#[test]
fn kd_closed_forms() {
    let mut tape = Tape::<f32>::new();
    let s = tape.leaf(Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap());
    let same = kd_loss(&mut tape, s, &Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap()).unwrap();
    assert_eq!(tape.scalar(same), 0.0);
    let diff = kd_loss(&mut tape, s, &Tensor::new(&[1, 2], vec![-0.5, -2.0]).unwrap()).unwrap();
    assert_eq!(tape.scalar(diff), 1.0);
}
