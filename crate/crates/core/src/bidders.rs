//! Uniform and value-quantile bid-scaling strategies plus offline dataset
//! generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::env::STREAM_STRATEGIES;
use crate::auction::record::{config_hash, run_episode, write_shard, EpisodeRecord, Manifest, ShardInfo};
use crate::auction::{subseed, AuctionConfig, AuctionEnv, Bid, StepView};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformScaler {
    pub alpha: f64,
}

/// Piecewise multipliers over value bins; `boundaries` has one entry fewer
/// than `multipliers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonUniformScaler {
    pub boundaries: Vec<f64>,
    pub multipliers: Vec<f64>,
}

impl NonUniformScaler {
    pub fn new(boundaries: Vec<f64>, multipliers: Vec<f64>) -> Result<Self> {
        if multipliers.len() != boundaries.len() + 1 {
            return Err(Error::Config(format!(
                "{} boundaries need {} multipliers, got {}",
                boundaries.len(),
                boundaries.len() + 1,
                multipliers.len()
            )));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("boundaries must be strictly increasing".into()));
        }
        if multipliers.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::Config("multipliers must be positive".into()));
        }
        Ok(Self { boundaries, multipliers })
    }

    /// Bin of `value`: values equal to a boundary fall in the upper bin.
    pub fn bin(&self, value: f64) -> usize {
        self.boundaries.partition_point(|b| *b <= value)
    }

    pub fn multiplier(&self, value: f64) -> f64 {
        self.multipliers[self.bin(value)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Uniform(UniformScaler),
    NonUniform(NonUniformScaler),
}

impl Strategy {
    pub fn bid(&self, value: f64) -> f64 {
        match self {
            Strategy::Uniform(u) => u.alpha * value,
            Strategy::NonUniform(n) => n.multiplier(value) * value,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Strategy::Uniform(_))
    }
}

pub fn uniform_bid(alpha: f64, values: &[(u64, f64)]) -> Vec<(u64, f64)> {
    values.iter().map(|&(k, v)| (k, alpha * v)).collect()
}

pub fn nonuniform_bid(scaler: &NonUniformScaler, values: &[(u64, f64)]) -> Vec<(u64, f64)> {
    values.iter().map(|&(k, v)| (k, scaler.multiplier(v) * v)).collect()
}

/// Bids from fixed per-agent strategies for every exposed pair in `view`.
pub fn strategy_bids(strategies: &[Strategy], view: &StepView) -> Vec<Bid> {
    let mut out = Vec::new();
    for io in &view.live {
        for &(agent, value) in &io.values {
            out.push(Bid { agent, io: io.id, bid: strategies[agent].bid(value) });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BidderConfig {
    /// Probability that an agent uses the uniform scaler in an episode.
    pub uniform_prob: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub bins: usize,
    pub multiplier_min: f64,
    pub multiplier_max: f64,
    pub shard_size: usize,
}

impl Default for BidderConfig {
    fn default() -> Self {
        Self {
            uniform_prob: 0.5,
            alpha_min: 0.3,
            alpha_max: 1.5,
            bins: 4,
            multiplier_min: 0.3,
            multiplier_max: 3.0,
            shard_size: 256,
        }
    }
}

impl BidderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.uniform_prob) {
            return Err(Error::Config(format!("uniform_prob must lie in [0, 1], got {}", self.uniform_prob)));
        }
        if !(self.alpha_min > 0.0 && self.alpha_max >= self.alpha_min) {
            return Err(Error::Config("alpha range must satisfy 0 < min <= max".into()));
        }
        if !(self.multiplier_min > 0.0 && self.multiplier_max >= self.multiplier_min) {
            return Err(Error::Config("multiplier range must satisfy 0 < min <= max".into()));
        }
        if self.bins == 0 || self.shard_size == 0 {
            return Err(Error::Config("bins and shard_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo.ln()..hi.ln()).exp()
    } else {
        lo
    }
}

/// Per-agent strategies for the episode with seed `seed`.
pub fn draw_strategies(auction: &AuctionConfig, bidders: &BidderConfig, seed: u64) -> Vec<Strategy> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, STREAM_STRATEGIES));
    let boundaries = auction.value_quantiles(bidders.bins);
    (0..auction.agents)
        .map(|_| {
            if rng.random_bool(bidders.uniform_prob) {
                Strategy::Uniform(UniformScaler { alpha: log_uniform(&mut rng, bidders.alpha_min, bidders.alpha_max) })
            } else {
                let multipliers = (0..bidders.bins)
                    .map(|_| log_uniform(&mut rng, bidders.multiplier_min, bidders.multiplier_max))
                    .collect();
                Strategy::NonUniform(NonUniformScaler { boundaries: boundaries.clone(), multipliers })
            }
        })
        .collect()
}

pub fn simulate_episode(auction: &AuctionConfig, bidders: &BidderConfig, seed: u64) -> Result<EpisodeRecord> {
    let strategies = draw_strategies(auction, bidders, seed);
    let env = AuctionEnv::new(auction, seed)?;
    let policy_strategies = strategies.clone();
    run_episode(env, strategies, move |view| Ok(strategy_bids(&policy_strategies, view)))
}

/// Worker count from `BIDLAB_WORKERS`, defaulting to 1.
pub fn worker_count() -> usize {
    std::env::var("BIDLAB_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|n| *n >= 1).unwrap_or(1)
}

/// Evaluate `jobs` in parallel across the configured worker count while
/// keeping the output order fixed.
pub fn parallel_map<T: Send, F: Fn(usize) -> Result<T> + Sync>(jobs: usize, f: F) -> Result<Vec<T>> {
    let workers = worker_count().min(jobs.max(1));
    if workers <= 1 {
        return (0..jobs).map(f).collect();
    }
    let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..jobs).step_by(workers).collect()).collect();
    let results: Vec<Vec<(usize, Result<T>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(|&j| (j, f(j))).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut slots: Vec<Option<Result<T>>> = (0..jobs).map(|_| None).collect();
    for (j, r) in results.into_iter().flatten() {
        slots[j] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Serialize)]
struct DatasetIdentity<'a> {
    auction: &'a AuctionConfig,
    bidders: &'a BidderConfig,
}

/// Simulate `n_episodes` episodes with seeds `seed..seed + n_episodes` and
/// write them as JSON-lines shards plus a manifest under `out`.
///
/// On failure every shard written by this call is removed.
pub fn generate_dataset(
    auction: &AuctionConfig,
    bidders: &BidderConfig,
    n_episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    auction.validate()?;
    bidders.validate()?;
    fs::create_dir_all(out)?;
    let plan: Vec<(String, Vec<u64>)> = (0..n_episodes.div_ceil(bidders.shard_size))
        .map(|s| {
            let lo = s * bidders.shard_size;
            let hi = (lo + bidders.shard_size).min(n_episodes);
            (format!("shard-{s:05}.jsonl"), (lo..hi).map(|e| seed + e as u64).collect())
        })
        .collect();
    let workers = worker_count().min(plan.len().max(1));
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let plan = &plan;
                scope.spawn(move || -> Vec<Result<()>> {
                    plan.iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|(file, seeds)| write_one_shard(auction, bidders, &out.join(file), seeds))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("shard worker panicked")).collect()
    });
    if let Some(err) = results.into_iter().find_map(|r| r.err()) {
        cleanup(out, &plan);
        return Err(err);
    }
    let manifest = Manifest {
        config_hash: config_hash(&DatasetIdentity { auction, bidders })?,
        seed_start: seed,
        seed_end: seed + n_episodes as u64,
        count: n_episodes,
        shards: plan.into_iter().map(|(file, seeds)| ShardInfo { file, seeds }).collect(),
    };
    manifest.save(out)?;
    Ok(manifest)
}

fn write_one_shard(auction: &AuctionConfig, bidders: &BidderConfig, path: &Path, seeds: &[u64]) -> Result<()> {
    let episodes = seeds.iter().map(|&s| simulate_episode(auction, bidders, s)).collect::<Result<Vec<_>>>()?;
    let tmp = tmp_path(path);
    write_shard(&tmp, &episodes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".partial");
    PathBuf::from(p)
}

fn cleanup(out: &Path, plan: &[(String, Vec<u64>)]) {
    for (file, _) in plan {
        let path = out.join(file);
        let _ = fs::remove_file(tmp_path(&path));
        let _ = fs::remove_file(path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scaling() {
        assert_eq!(uniform_bid(1.0, &[(1, 2.0)]), vec![(1, 2.0)]);
        assert_eq!(uniform_bid(0.5, &[(1, 2.0), (2, 4.0)]), vec![(1, 1.0), (2, 2.0)]);
    }

    #[test]
    fn equal_multipliers_match_uniform() {
        let s = NonUniformScaler::new(vec![0.5, 1.0, 2.0], vec![0.7; 4]).unwrap();
        let values = [(0, 0.1), (1, 0.5), (2, 1.5), (3, 9.0)];
        assert_eq!(nonuniform_bid(&s, &values), uniform_bid(0.7, &values));
    }

    #[test]
    fn two_bins() {
        let s = NonUniformScaler::new(vec![1.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(nonuniform_bid(&s, &[(0, 0.8), (1, 3.0)]), vec![(0, 0.4), (1, 6.0)]);
    }

    #[test]
    fn malformed_scaler_rejected() {
        assert!(NonUniformScaler::new(vec![2.0, 1.0], vec![1.0; 3]).is_err());
        assert!(NonUniformScaler::new(vec![1.0], vec![1.0]).is_err());
        assert!(NonUniformScaler::new(vec![1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_episodes_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&AuctionConfig::default(), &BidderConfig::default(), 0, 5, dir.path()).unwrap();
        assert_eq!(m.count, 0);
        assert!(m.shards.is_empty());
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
    }

    #[test]
    fn failed_generation_leaves_no_shards() {
        let dir = tempfile::tempdir().unwrap();
        // A directory squatting on the second shard's name makes its rename fail.
        fs::create_dir_all(dir.path().join("shard-00001.jsonl/x")).unwrap();
        let bidders = BidderConfig { shard_size: 2, ..Default::default() };
        let cfg = AuctionConfig { horizon: 3, ..Default::default() };
        assert!(generate_dataset(&cfg, &bidders, 4, 0, dir.path()).is_err());
        assert!(!dir.path().join("shard-00000.jsonl").exists());
        assert!(!dir.path().join("manifest.json").exists());
    }
}
