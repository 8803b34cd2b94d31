use bidlab_core::align::{
    best_of_n_plan, expectile_loss, keep_count, raft_round, sample_candidate, select_kept, select_plan, weighted_score,
    KpiWeights, NormStats, PlanCandidate, PlanContext, ValueHead, OUTPUTS, SPEND,
};
use bidlab_core::auction::env::subseed;
use bidlab_core::ldm::{Ldm, LdmConfig};
use bidlab_core::numkit::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 3;
const W: usize = 6;

fn models(seed: u64) -> (Ldm, ValueHead) {
    let cfg = LdmConfig { window: W, steps: 10, blocks: 1, kernel: 3, channels: 4, step_embed: 4, ..Default::default() };
    let ldm = Ldm::new(&cfg, D, 2, seed).unwrap();
    let mut head = ValueHead::new(D, 2, 8, seed + 1);
    head.stats = NormStats { mean: [0.5; OUTPUTS], std: [0.8; OUTPUTS] };
    (ldm, head)
}

fn context(seed: u64, remaining: f64) -> PlanContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PlanContext { x: (0..D * W).map(|_| rng.random_range(-1.0f32..1.0)).collect(), known: 2, cond: vec![1.0, 0.4], remaining, end: 4 }
}

fn expectile(pred: &[f32], target: &[f32], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(&[1, pred.len()], pred.to_vec()).unwrap());
    let l = expectile_loss(&mut tape, p, &Tensor::new(&[1, target.len()], target.to_vec()).unwrap(), tau).unwrap();
    tape.scalar(l) as f64
}

fn candidate(id: u64, score: f64, feasible: bool) -> PlanCandidate {
    PlanCandidate { id, x: vec![], score, feasible, fallback: false, kpis: [0.0; OUTPUTS] }
}

proptest! {
    #[test]
    fn symmetric_expectile_is_half_mse(pairs in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..20)) {
        let (p, t): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let mse = p.iter().zip(&t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / p.len() as f64;
        prop_assert!((expectile(&p, &t, 0.5) - 0.5 * mse).abs() < 1e-5 * mse.max(1.0));
    }

    #[test]
    fn expectile_weights_follow_the_residual_sign(
        pairs in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..20),
        tau in 0.05f64..0.95,
    ) {
        let (p, t): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let want = p
            .iter()
            .zip(&t)
            .map(|(a, b)| {
                let u = (b - a) as f64;
                (if u < 0.0 { 1.0 - tau } else { tau }) * u * u
            })
            .sum::<f64>()
            / p.len() as f64;
        prop_assert!((expectile(&p, &t, tau) - want).abs() < 1e-5 * want.max(1.0));
    }

    #[test]
    fn argmax_ignores_positive_weight_scaling(
        zs in prop::collection::vec(prop::array::uniform6(-3.0f64..3.0), 2..12),
        w in prop::array::uniform5(-2.0f64..2.0),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(w.iter().any(|v| v.abs() > 1e-3));
        let stats = NormStats { mean: [0.0; OUTPUTS], std: [1.0; OUTPUTS] };
        let argmax = |weights: &KpiWeights| {
            let scores: Vec<f64> = zs.iter().map(|z| weighted_score(z, weights, &stats).0).collect();
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            // Skip near-ties, where rounding of the scaled sum could flip the order.
            let gap = scores.iter().enumerate().filter(|(i, _)| *i != best).map(|(_, s)| scores[best] - s).fold(f64::INFINITY, f64::min);
            (best, gap)
        };
        let weights = KpiWeights(w);
        let (a, gap) = argmax(&weights);
        prop_assume!(gap > 1e-9);
        prop_assert_eq!(a, argmax(&weights.scaled(k)).0);
    }

    #[test]
    fn kept_set_is_the_top_quantile(scores in prop::collection::vec(-10.0f64..10.0, 1..64), q in 0.01f64..1.0, seed in 0u64..100) {
        let m = scores.len();
        let with_ids: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, s)| (i as u64 * 3, *s)).collect();
        let kept = select_kept(&with_ids, q, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(kept.len(), ((q * m as f64).ceil() as usize).clamp(1, m));
        let degenerate = scores.iter().all(|s| *s == scores[0]);
        if !degenerate {
            // Oracle: a sample is kept iff fewer than k samples outrank it.
            for &(id, s) in &with_ids {
                let above = with_ids.iter().filter(|&&(j, t)| t > s || (t == s && j < id)).count();
                prop_assert_eq!(kept.contains(&id), above < kept.len());
            }
        }
    }
}

#[test]
fn keep_counts_at_the_documented_quantiles() {
    assert_eq!(keep_count(32, 0.25), 8);
    assert_eq!(keep_count(32, 1.0), 32);
    let scores: Vec<(u64, f64)> = (0..32).map(|i| (i, i as f64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(select_kept(&scores, 0.25, &mut rng), (24..32).collect::<Vec<u64>>());
    assert_eq!(select_kept(&scores, 1.0, &mut rng), (0..32).collect::<Vec<u64>>());
}

#[test]
fn three_candidate_selection_matches_exhaustive_oracle() {
    let ctx = context(0, 1.0);
    let values = [-1.0, 0.0, 2.0];
    for feas in 0u8..8 {
        for a in values {
            for b in values {
                for c in values {
                    let scores = [a, b, c];
                    let cands: Vec<PlanCandidate> = (0..3).map(|i| candidate(i as u64, scores[i], feas & (1 << i) != 0)).collect();
                    let got = select_plan(cands, &ctx, 3);
                    let mut want: Option<usize> = None;
                    for i in 0..3 {
                        if feas & (1 << i) != 0 && want.is_none_or(|j| scores[i] > scores[j]) {
                            want = Some(i);
                        }
                    }
                    match want {
                        Some(i) => {
                            assert_eq!(got.id, i as u64);
                            assert!(got.feasible && !got.fallback);
                        }
                        None => {
                            assert!(got.fallback && !got.feasible);
                            assert_eq!(got.x, ctx.x);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn best_of_32_replays_to_the_feasible_argmax() {
    let (ldm, head) = models(5);
    let seed = 99;
    let n = 32;
    // Set the budget at the median predicted spend so feasibility splits the draws.
    let open = context(3, f64::INFINITY);
    let mut spends: Vec<f64> = (0..n)
        .map(|j| {
            let c = sample_candidate(&ldm, &head, &KpiWeights([1.0, 0.0, 0.0, 0.0, 0.5]), &open, j, subseed(seed, j)).unwrap();
            head.predict(&c.x[open.known * D..(open.known + 1) * D], &open.cond).unwrap()[SPEND]
        })
        .collect();
    spends.sort_by(f64::total_cmp);
    let ctx = PlanContext { remaining: spends[n as usize / 2], ..open };
    let weights = KpiWeights([1.0, 0.0, 0.0, 0.0, 0.5]);
    let plan = best_of_n_plan(&ldm, &head, &weights, &ctx, n as usize, seed).unwrap();

    let replay: Vec<PlanCandidate> = (0..n).map(|j| sample_candidate(&ldm, &head, &weights, &ctx, j, subseed(seed, j)).unwrap()).collect();
    let feasible: Vec<&PlanCandidate> = replay.iter().filter(|c| c.feasible).collect();
    assert!(!feasible.is_empty() && feasible.len() < replay.len());
    let best = feasible.iter().fold(feasible[0], |b, c| if c.score > b.score { c } else { b });
    assert_eq!(plan.id, best.id);
    assert_eq!(plan.score, best.score);
    assert_eq!(plan.x, best.x);
    // Known steps are copied from the context.
    assert_eq!(&plan.x[..ctx.known * D], &ctx.x[..ctx.known * D]);

    let broke = PlanContext { remaining: f64::NEG_INFINITY, ..ctx.clone() };
    let fallback = best_of_n_plan(&ldm, &head, &weights, &broke, 4, seed).unwrap();
    assert!(fallback.fallback);
}

#[test]
fn raft_round_trains_only_on_kept_samples() {
    let (mut ldm, head) = models(8);
    let pool: Vec<PlanContext> = (0..5).map(|s| context(s, 10.0)).collect();
    let weights = KpiWeights([1.0, 0.0, 0.0, 0.0, 0.0]);
    let before = ldm.store.clone();
    let r = raft_round(&mut ldm, &head, &weights, &pool, 32, 0.25, 3, 1e-3, 2, 17).unwrap();
    assert_eq!(r.sampled.len(), 32);
    assert_eq!(r.kept.len(), 8);
    assert_eq!(r.kept_fraction, 0.25);
    assert!(r.audit());
    assert_eq!(r.trained, r.kept);
    assert!(r.kept.iter().all(|id| r.sampled.contains(id)));
    assert!(r.sampled.iter().all(|id| id >> 32 == 2));
    assert!(before != ldm.store);

    let mut tampered = r.clone();
    tampered.trained.push(*r.sampled.iter().find(|id| !r.kept.contains(id)).unwrap());
    assert!(!tampered.audit());

    assert!(raft_round(&mut ldm, &head, &weights, &pool, 9, 0.25, 1, 1e-3, 0, 0).is_err());
    assert!(raft_round(&mut ldm, &head, &weights, &pool, 16, 0.0, 1, 1e-3, 0, 0).is_err());
}
