use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::AuctionConfig;
use super::env::{AgentProfile, AuctionEnv, Bid, ImpressionOpportunity, StepOutcome, StepView};
use crate::bidders::Strategy;
use crate::error::{Error, Result};

/// One stepped time index: new arrivals, the submitted bids and the outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub arrivals: Vec<ImpressionOpportunity>,
    pub bids: Vec<Bid>,
    pub outcome: StepOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub config: AuctionConfig,
    pub profiles: Vec<AgentProfile>,
    /// Strategy that produced each agent's bids, when known.
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    pub steps: Vec<StepRecord>,
    pub cum_cost: Vec<f64>,
    pub cum_value: Vec<f64>,
}

impl EpisodeRecord {
    pub fn n_agents(&self) -> usize {
        self.profiles.len()
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn arrivals(&self) -> Vec<Vec<ImpressionOpportunity>> {
        let mut out = vec![Vec::new(); self.config.horizon];
        for s in &self.steps {
            out[s.t] = s.arrivals.clone();
        }
        out
    }

    /// Fresh environment positioned at `t = 0` for this episode.
    pub fn env(&self) -> AuctionEnv {
        AuctionEnv::with_parts(&self.config, self.seed, self.profiles.clone(), self.arrivals())
    }

    /// Views before each recorded step plus the terminal view.
    pub fn views(&self) -> Result<Vec<StepView>> {
        let mut env = self.env();
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        for s in &self.steps {
            out.push(env.view());
            env.step(&s.bids)?;
        }
        out.push(env.view());
        Ok(out)
    }

    /// Re-run the stored bids through a fresh environment and compare outcomes.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut env = self.env();
        for s in &self.steps {
            if env.step(&s.bids)? != s.outcome {
                return Ok(false);
            }
        }
        Ok(env.cum_cost() == self.cum_cost.as_slice() && env.cum_value() == self.cum_value.as_slice())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Drive `env` to the end with `policy` and record everything.
pub fn run_episode<F>(mut env: AuctionEnv, strategies: Vec<Strategy>, mut policy: F) -> Result<EpisodeRecord>
where
    F: FnMut(&StepView) -> Result<Vec<Bid>>,
{
    let arrivals = env.arrivals().to_vec();
    let mut steps = Vec::with_capacity(env.config().horizon);
    while !env.done() {
        let view = env.view();
        let bids = policy(&view)?;
        let outcome = env.step(&bids)?;
        steps.push(StepRecord { t: view.t, arrivals: arrivals[view.t].clone(), bids, outcome });
    }
    Ok(EpisodeRecord {
        seed: env.seed(),
        config: env.config().clone(),
        profiles: env.profiles().to_vec(),
        strategies,
        steps,
        cum_cost: env.cum_cost().to_vec(),
        cum_value: env.cum_value().to_vec(),
    })
}

/// Hex SHA-256 of the canonical JSON form of any serializable config.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed_start: u64,
    pub seed_end: u64,
    pub count: usize,
    pub shards: Vec<ShardInfo>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn episode_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.shards.iter().flat_map(|s| s.seeds.iter().copied())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Episodes sharing a seed set are the same episodes.
pub fn check_disjoint(train: &Manifest, held_out: &Manifest) -> Result<()> {
    let seen: std::collections::BTreeSet<u64> = train.episode_seeds().collect();
    let shared: Vec<u64> = held_out.episode_seeds().filter(|s| seen.contains(s)).collect();
    if train.config_hash == held_out.config_hash && !shared.is_empty() {
        return Err(Error::Overlap(format!(
            "{} held-out episode(s) also in training data, first seed {}",
            shared.len(),
            shared[0]
        )));
    }
    Ok(())
}

pub fn write_shard(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ep in episodes {
        w.write_all(ep.to_json_line()?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn shard_paths(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    manifest.shards.iter().map(|s| dir.join(&s.file)).collect()
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<EpisodeRecord>)> {
    let manifest = Manifest::load(dir)?;
    let mut episodes = Vec::with_capacity(manifest.count);
    for p in shard_paths(dir, &manifest) {
        episodes.extend(read_shard(&p)?);
    }
    if episodes.len() != manifest.count {
        return Err(Error::Input(format!(
            "manifest lists {} episodes but shards hold {}",
            manifest.count,
            episodes.len()
        )));
    }
    Ok((manifest, episodes))
}
