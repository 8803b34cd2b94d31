use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    episode_contexts, evaluation_config, mean_sample_score, raft_round, value_samples, write_round_log, KpiWeights,
    Planner, RaftRound, ValueHead, History,
};
use crate::auction::env::subseed;
use crate::auction::kpi::{compute_kpis, mean_std};
use crate::auction::{check_disjoint, load_dataset, run_episode, AuctionEnv, EpisodeRecord, Manifest};
use crate::belief::Student;
use crate::bidders::{draw_strategies, generate_dataset, parallel_map, strategy_bids, Strategy, UniformScaler};
use crate::error::{Error, Result};
use crate::graph::{EpisodeEmbedding, GraphModel};
use crate::idm::{bid_accuracy, predict_episode, train_graph_idm, BidPrediction, EpisodeData, Idm};
use crate::ldm::{condition_dim, episode_sequences, windows, Ldm};
use crate::numkit::{Checkpoint, Dtype};

use super::config::ExperimentConfig;
use super::report::{export_report, provenance, BidAccuracyRow, ForecastEntry, KpiRow, MetricsReport};

pub const GRAPH_CKPT: &str = "checkpoints/graph.ckpt";
pub const STUDENT_CKPT: &str = "checkpoints/student.ckpt";
pub const LDM_CKPT: &str = "checkpoints/ldm.ckpt";
pub const ALIGN_CKPT: &str = "checkpoints/align.ckpt";
pub const TRAIN_DATA: &str = "data/train";
pub const HELDOUT_DATA: &str = "data/heldout";

/// Sub-seed streams of the pipeline stages.
const GRAPH_INIT: u64 = 10;
const GRAPH_TRAIN: u64 = 11;
const STUDENT_INIT: u64 = 12;
const STUDENT_TRAIN: u64 = 13;
const LDM_INIT: u64 = 20;
const LDM_TRAIN: u64 = 21;
const VALUE_INIT: u64 = 30;
const VALUE_TRAIN: u64 = 31;
const RAFT: u64 = 32;
const EVAL: u64 = 40;

fn require(out: &Path, rel: &str, producer: &str) -> Result<PathBuf> {
    let p = out.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(format!("{} is missing; run {producer} first", p.display())))
    }
}

fn load_ckpt(out: &Path, rel: &str, producer: &str) -> Result<Checkpoint> {
    Checkpoint::load(&require(out, rel, producer)?)
}

fn save_ckpt(out: &Path, rel: &str, ckpt: &Checkpoint) -> Result<()> {
    let p = out.join(rel);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(&p)
}

fn write_losses(out: &Path, name: &str, losses: &[f64]) -> Result<()> {
    let dir = out.join("logs");
    fs::create_dir_all(&dir)?;
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:.8}\n"));
    }
    fs::write(dir.join(name), s)?;
    Ok(())
}

fn new_ckpt(cfg: &ExperimentConfig, seed: u64) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(Dtype::F32);
    c.set_meta("config_hash", cfg.hash()?);
    c.set_meta("seed", seed);
    Ok(c)
}

fn load_train(out: &Path) -> Result<(Manifest, Vec<EpisodeRecord>)> {
    require(out, &format!("{TRAIN_DATA}/manifest.json"), "gen-data")?;
    load_dataset(&out.join(TRAIN_DATA))
}

/// Held-out episodes after checking their seeds against the training set.
fn load_heldout(out: &Path) -> Result<Vec<EpisodeRecord>> {
    let (train, _) = load_train(out)?;
    require(out, &format!("{HELDOUT_DATA}/manifest.json"), "gen-data")?;
    let (held, episodes) = load_dataset(&out.join(HELDOUT_DATA))?;
    check_disjoint(&train, &held)?;
    Ok(episodes)
}

/// Training and held-out datasets.
pub fn gen_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(Manifest, Manifest)> {
    cfg.validate()?;
    let train = generate_dataset(&cfg.auction, &cfg.bidders, cfg.train.episodes, seed, &out.join(TRAIN_DATA))?;
    let held = generate_dataset(
        &cfg.auction,
        &cfg.bidders,
        cfg.train.heldout_episodes,
        seed.wrapping_add(cfg.train.heldout_offset),
        &out.join(HELDOUT_DATA),
    )?;
    check_disjoint(&train, &held)?;
    Ok((train, held))
}

/// Encoder plus IDM, then the optional belief-graph student.
pub fn train_graph(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (_, episodes) = load_train(out)?;
    let mut graph = GraphModel::new(&cfg.graph, &cfg.auction, subseed(seed, GRAPH_INIT))?;
    let data = parallel_map(episodes.len(), |e| EpisodeData::new(&graph, &episodes[e]))?;
    let mut idm = Idm::for_model(&graph, cfg.auction.categories, cfg.idm.hidden, subseed(seed, GRAPH_INIT + 100));
    let log = train_graph_idm(&mut graph, &mut idm, &data, &cfg.idm, subseed(seed, GRAPH_TRAIN))?;
    write_losses(out, "train_graph.csv", &log.losses)?;
    let mut ckpt = new_ckpt(cfg, seed)?;
    graph.write_into(&mut ckpt)?;
    idm.write_into(&mut ckpt);
    ckpt.set_meta("idm.hidden", cfg.idm.hidden);
    save_ckpt(out, GRAPH_CKPT, &ckpt)?;
    if cfg.train.student {
        let mut student = Student::new(&graph, &cfg.belief, subseed(seed, STUDENT_INIT))?;
        let sdata = parallel_map(episodes.len(), |e| student.prepare(&graph, &episodes[e]))?;
        let losses = student.train(&graph, &sdata, subseed(seed, STUDENT_TRAIN))?;
        write_losses(out, "train_student.csv", &losses)?;
        let mut sc = new_ckpt(cfg, seed)?;
        student.write_into(&mut sc)?;
        save_ckpt(out, STUDENT_CKPT, &sc)?;
    }
    Ok(())
}

fn load_graph(cfg: &ExperimentConfig, out: &Path) -> Result<(GraphModel, Idm)> {
    let ckpt = load_ckpt(out, GRAPH_CKPT, "train-graph")?;
    let graph = GraphModel::read_from(&cfg.auction, &ckpt)?;
    let hidden = ckpt
        .meta("idm.hidden")
        .and_then(|h| h.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing idm.hidden".into()))?;
    let idm = Idm::read_from(&ckpt, hidden)?;
    Ok((graph, idm))
}

/// Raw `(window, condition)` pairs from teacher embeddings.
pub fn diffusion_windows(graph: &GraphModel, episodes: &[EpisodeRecord], window: usize, stride: usize) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let embs = parallel_map(episodes.len(), |e| graph.embed_episode(&episodes[e]))?;
    Ok(sequence_windows(&embs, episodes, graph.dim(), window, stride))
}

fn sequence_windows(embs: &[EpisodeEmbedding], episodes: &[EpisodeRecord], d: usize, window: usize, stride: usize) -> Vec<(Vec<f32>, Vec<f32>)> {
    let mut raw = Vec::new();
    for (emb, ep) in embs.iter().zip(episodes) {
        for (seq, cond) in episode_sequences(emb, ep) {
            raw.extend(windows(&seq, d, window, stride).into_iter().map(|w| (w, cond.clone())));
        }
    }
    raw
}

pub fn train_ldm(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (graph, _) = load_graph(cfg, out)?;
    let (_, episodes) = load_train(out)?;
    let raw = diffusion_windows(&graph, &episodes, cfg.ldm.window, cfg.train.ldm_stride)?;
    if raw.is_empty() {
        return Err(Error::Input("episodes are shorter than the diffusion window".into()));
    }
    fit_ldm(cfg, seed, out, &raw, graph.dim())
}

fn fit_ldm(cfg: &ExperimentConfig, seed: u64, out: &Path, raw: &[(Vec<f32>, Vec<f32>)], dim: usize) -> Result<()> {
    let mut ldm = Ldm::new(&cfg.ldm, dim, condition_dim(cfg.auction.categories), subseed(seed, LDM_INIT))?;
    let pool = ldm.prepare(raw);
    let losses = ldm.fit(&pool, cfg.ldm.train_steps, subseed(seed, LDM_TRAIN))?;
    write_losses(out, "train_ldm.csv", &losses)?;
    let mut ckpt = new_ckpt(cfg, seed)?;
    ldm.write_into(&mut ckpt)?;
    save_ckpt(out, LDM_CKPT, &ckpt)
}

/// Outcome of the alignment stage.
#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub rounds: Vec<RaftRound>,
    /// Mean fresh-sample score before any round and after each round.
    pub fresh_scores: Vec<f64>,
}

pub fn align(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<AlignOutcome> {
    cfg.validate()?;
    let mut ldm = Ldm::read_from(&load_ckpt(out, LDM_CKPT, "train-ldm")?)?;
    let (graph, _) = load_graph(cfg, out)?;
    let (_, episodes) = load_train(out)?;
    let embs = parallel_map(episodes.len(), |e| graph.embed_episode(&episodes[e]))?;
    let mut samples = Vec::new();
    let mut pool = Vec::new();
    for (emb, ep) in embs.iter().zip(&episodes) {
        samples.extend(value_samples(emb, ep, cfg.align.gamma));
        pool.extend(episode_contexts(emb, ep, cfg.ldm.window));
    }
    let mut head = ValueHead::new(graph.dim(), condition_dim(cfg.auction.categories), cfg.align.hidden, subseed(seed, VALUE_INIT));
    let losses = head.fit(&samples, &cfg.align, subseed(seed, VALUE_TRAIN))?;
    write_losses(out, "train_value.csv", &losses)?;
    let weights = KpiWeights(cfg.align.weights);
    let outcome = align_rounds(&mut ldm, &head, &weights, &pool, cfg, subseed(seed, RAFT))?;
    let dir = out.join("logs");
    fs::create_dir_all(&dir)?;
    write_round_log(fs::File::create(dir.join("align_rounds.csv"))?, &outcome.rounds)?;
    let mut ckpt = new_ckpt(cfg, seed)?;
    ldm.write_into(&mut ckpt)?;
    head.write_into(&mut ckpt)?;
    ckpt.set_meta("value.hidden", cfg.align.hidden);
    save_ckpt(out, ALIGN_CKPT, &ckpt)?;
    Ok(outcome)
}

/// Rejection-sampling rounds with fresh-sample scores measured on a fixed
/// evaluation subset of the pool before and after every round.
pub fn align_rounds(
    ldm: &mut Ldm,
    head: &ValueHead,
    weights: &KpiWeights,
    pool: &[crate::align::PlanContext],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<AlignOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval: Vec<_> = sample(&mut rng, pool.len(), cfg.align.samples.min(pool.len())).iter().map(|i| pool[i].clone()).collect();
    let eval_seed = subseed(seed, 1);
    let mut fresh = vec![mean_sample_score(ldm, head, weights, &eval, eval_seed)?];
    let mut rounds = Vec::new();
    for r in 0..cfg.align.rounds {
        let round = raft_round(
            ldm,
            head,
            weights,
            pool,
            cfg.align.samples,
            cfg.align.keep,
            cfg.align.finetune_steps,
            cfg.align.finetune_lr,
            r,
            subseed(seed, 100 + r as u64),
        )?;
        if !round.audit() {
            return Err(Error::Eval(format!("round {r} trained on a rejected sample")));
        }
        rounds.push(round);
        fresh.push(mean_sample_score(ldm, head, weights, &eval, eval_seed)?);
    }
    Ok(AlignOutcome { rounds, fresh_scores: fresh })
}

pub fn load_planner(cfg: &ExperimentConfig, out: &Path) -> Result<Planner> {
    let (graph, idm) = load_graph(cfg, out)?;
    let ckpt = load_ckpt(out, ALIGN_CKPT, "align")?;
    let ldm = Ldm::read_from(&ckpt)?;
    let hidden = ckpt
        .meta("value.hidden")
        .and_then(|h| h.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing value.hidden".into()))?;
    let head = ValueHead::read_from(&ckpt, hidden)?;
    Ok(Planner { graph, idm, ldm, head, weights: KpiWeights(cfg.align.weights), candidates: cfg.align.candidates })
}

fn kpi_rows(policy: &str, episode: &EpisodeRecord, agents: &[usize]) -> Vec<KpiRow> {
    let budgets: Vec<f64> = episode.profiles.iter().map(|p| p.budget).collect();
    let report = compute_kpis(episode, &budgets);
    agents
        .iter()
        .map(|&i| {
            let a = &report.agents[i];
            KpiRow {
                policy: policy.to_string(),
                seed: episode.seed,
                agent: i,
                ret: a.ret,
                cost: a.cost,
                cpa: a.cpa,
                roi: a.roi,
                win_rate: a.win_rate,
                budget_adherence: a.budget_adherence,
                social_welfare: report.social_welfare,
            }
        })
        .collect()
}

/// Baseline episode: controlled agents bid with a uniform scaler.
pub fn baseline_episode(cfg: &ExperimentConfig, ep_seed: u64) -> Result<EpisodeRecord> {
    let auction = evaluation_config(&cfg.auction);
    let mut strategies = draw_strategies(&auction, &cfg.bidders, ep_seed);
    for &i in &cfg.align.controlled {
        strategies[i] = Strategy::Uniform(UniformScaler { alpha: cfg.eval.baseline_alpha });
    }
    let env = AuctionEnv::new(&auction, ep_seed)?;
    let s = strategies.clone();
    run_episode(env, strategies, move |view| Ok(strategy_bids(&s, view)))
}

/// Planner episode: controlled agents follow `act`, the rest their drawn
/// strategies.
pub fn planner_episode(cfg: &ExperimentConfig, planner: &Planner, ep_seed: u64) -> Result<(EpisodeRecord, History)> {
    let auction = evaluation_config(&cfg.auction);
    let strategies = draw_strategies(&auction, &cfg.bidders, ep_seed);
    let env = AuctionEnv::new(&auction, ep_seed)?;
    let controlled = cfg.align.controlled.clone();
    let s = strategies.clone();
    let mut history = History::default();
    let rec = run_episode(env, strategies, |view| {
        let mut bids: Vec<_> = strategy_bids(&s, view).into_iter().filter(|b| !controlled.contains(&b.agent)).collect();
        bids.extend(planner.act(view, &controlled, &mut history, ep_seed, true)?);
        Ok(bids)
    })?;
    Ok((rec, history))
}

fn report_base(cfg: &ExperimentConfig, seeds: usize) -> Result<MetricsReport> {
    let hash = cfg.hash()?;
    Ok(MetricsReport { provenance: provenance(&hash), config_hash: hash, seeds, ..Default::default() })
}

/// Planner versus uniform baseline over `eval.seeds` episodes.
pub fn eval_kpi(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let planner = load_planner(cfg, out)?;
    let n = cfg.eval.seeds;
    let seeds: Vec<u64> = (0..n as u64).map(|s| seed.wrapping_add(cfg.eval.seed_offset).wrapping_add(s)).collect();
    let runs = parallel_map(n, |j| {
        let base = baseline_episode(cfg, seeds[j])?;
        let (plan, hist) = planner_episode(cfg, &planner, seeds[j])?;
        Ok((base, plan, hist))
    })?;
    let mut report = report_base(cfg, n)?;
    for (b, _, _) in &runs {
        report.kpi.extend(kpi_rows("baseline", b, &cfg.align.controlled));
    }
    for (_, p, _) in &runs {
        report.kpi.extend(kpi_rows("aligned", p, &cfg.align.controlled));
    }
    let plans: u64 = runs.iter().map(|r| r.2.plans).sum();
    let fallbacks: u64 = runs.iter().map(|r| r.2.fallbacks).sum();
    report.notes.push(("plans".into(), plans.to_string()));
    report.notes.push(("fallback plans".into(), fallbacks.to_string()));
    export_report(&report, &out.join("reports/eval-kpi"))?;
    Ok(report)
}

/// Mean bid over every training tuple.
pub fn mean_bid(episodes: &[EpisodeRecord]) -> f64 {
    let bids: Vec<f64> = episodes.iter().flat_map(|e| e.steps.iter().flat_map(|s| s.bids.iter().map(|b| b.bid))).collect();
    mean_std(&bids).0
}

/// Predictions replaced by a constant.
pub fn constant_predictions(preds: &[BidPrediction], value: f64) -> Vec<BidPrediction> {
    preds.iter().map(|p| BidPrediction { predicted: value, ..*p }).collect()
}

/// Held-out bid recovery: per-agent ℓ2, mean-bid baseline, RMSE and std.
#[derive(Clone, Debug)]
pub struct BidAccuracy {
    pub l2: Vec<f64>,
    pub baseline_l2: Vec<f64>,
    pub rmse: f64,
    pub bid_std: f64,
}

pub fn bid_accuracy_of(graph: &GraphModel, idm: &Idm, train: &[EpisodeRecord], heldout: &[EpisodeRecord]) -> Result<BidAccuracy> {
    let n = heldout.first().map_or(0, |e| e.n_agents());
    let preds = parallel_map(heldout.len(), |e| predict_episode(graph, idm, &EpisodeData::new(graph, &heldout[e])?))?;
    let mb = mean_bid(train);
    let base: Vec<Vec<BidPrediction>> = preds.iter().map(|p| constant_predictions(p, mb)).collect();
    let flat: Vec<&BidPrediction> = preds.iter().flatten().collect();
    let m = flat.len().max(1) as f64;
    let rmse = (flat.iter().map(|p| (p.predicted - p.actual).powi(2)).sum::<f64>() / m).sqrt();
    let actual: Vec<f64> = flat.iter().map(|p| p.actual).collect();
    Ok(BidAccuracy { l2: bid_accuracy(&preds, n), baseline_l2: bid_accuracy(&base, n), rmse, bid_std: mean_std(&actual).1 })
}

pub fn eval_bid_accuracy(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let heldout = load_heldout(out)?;
    let (_, train) = load_train(out)?;
    let (graph, idm) = load_graph(cfg, out)?;
    let acc = bid_accuracy_of(&graph, &idm, &train, &heldout)?;
    let mut report = report_base(cfg, heldout.len())?;
    report.bid_accuracy = acc
        .l2
        .iter()
        .zip(&acc.baseline_l2)
        .enumerate()
        .map(|(agent, (&l2, &baseline_l2))| BidAccuracyRow { agent, l2, baseline_l2 })
        .collect();
    report.notes.push(("bid rmse".into(), format!("{:.6}", acc.rmse)));
    report.notes.push(("bid std".into(), format!("{:.6}", acc.bid_std)));
    report.notes.push(("seed".into(), seed.to_string()));
    export_report(&report, &out.join("reports/eval-bid-accuracy"))?;
    Ok(report)
}

/// Mean forecast score per episode over non-overlapping windows.
pub fn forecast_scores(
    ldm: &Ldm,
    embed: &(dyn Fn(&EpisodeRecord) -> Result<EpisodeEmbedding> + Sync),
    episodes: &[EpisodeRecord],
    split: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let w = ldm.config.window;
    let d = ldm.dim();
    parallel_map(episodes.len(), |e| {
        let emb = embed(&episodes[e])?;
        let mut scores = Vec::new();
        for (seq, cond) in episode_sequences(&emb, &episodes[e]) {
            for (k, win) in windows(&seq, d, w, w).into_iter().enumerate() {
                let z = ldm.encode_window(&win);
                scores.push(ldm.forecast_loglik(&z, &cond, split, ldm.config.forecast_draws, subseed(seed ^ episodes[e].seed, k as u64))?);
            }
        }
        if scores.is_empty() {
            return Err(Error::Input("episode shorter than the diffusion window".into()));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    })
}

/// Trained, untrained and (when present) student forecast scores on the
/// held-out episodes.
pub fn eval_forecast(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let heldout = load_heldout(out)?;
    let (graph, _) = load_graph(cfg, out)?;
    let ldm = Ldm::read_from(&load_ckpt(out, LDM_CKPT, "train-ldm")?)?;
    let mut untrained = Ldm::new(&ldm.config, ldm.dim(), ldm.denoiser.cond_dim, subseed(seed, LDM_INIT))?;
    untrained.norm = ldm.norm.clone();
    let split = cfg.forecast_split();
    let k = ldm.config.forecast_draws;
    let es = subseed(seed, EVAL);
    let teacher = forecast_scores(&ldm, &|e| graph.embed_episode(e), &heldout, split, es)?;
    let base = forecast_scores(&untrained, &|e| graph.embed_episode(e), &heldout, split, es)?;
    let mut report = report_base(cfg, heldout.len())?;
    let mut push = |model: &str, scores: &[f64]| {
        for (s, e) in scores.iter().zip(&heldout) {
            report.forecast.push(ForecastEntry { model: model.into(), split, k, score: *s, seed: e.seed });
        }
    };
    push("teacher", &teacher);
    push("untrained", &base);
    let tm = mean_std(&teacher).0;
    if out.join(STUDENT_CKPT).exists() {
        let student = Student::read_from(&graph, &load_ckpt(out, STUDENT_CKPT, "train-graph")?)?;
        // The student replaces the encoder; downstream models are shared.
        let st = forecast_scores(&ldm, &|e| student.embed_episode(&graph, e), &heldout, split, es)?;
        push("student", &st);
        let sm = mean_std(&st).0;
        report.notes.push(("student/teacher retention".into(), format!("{:.4}", sm / tm)));
    }
    export_report(&report, &out.join("reports/eval-forecast"))?;
    Ok(report)
}
