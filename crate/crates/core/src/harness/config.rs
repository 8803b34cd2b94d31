use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::auction::{config_hash, AuctionConfig};
use crate::belief::BeliefConfig;
use crate::bidders::BidderConfig;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::idm::IdmConfig;
use crate::ldm::LdmConfig;

/// Dataset sizes and training-pipeline knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub heldout_episodes: usize,
    /// Held-out seeds start at `seed + heldout_offset`.
    pub heldout_offset: u64,
    /// Stride between diffusion training windows.
    pub ldm_stride: usize,
    /// Distill a belief-graph student after the teacher.
    pub student: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { episodes: 256, heldout_episodes: 64, heldout_offset: 1_000_000, ldm_stride: 2, student: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes (seeds) per KPI evaluation.
    pub seeds: usize,
    /// Evaluation episode seeds start at `seed + seed_offset`.
    pub seed_offset: u64,
    /// Scaling factor of the uniform baseline bidder.
    pub baseline_alpha: f64,
    /// Forecast split inside the window; 0 means half the window.
    pub split: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: 64, seed_offset: 2_000_000, baseline_alpha: 1.0, split: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub base: u64,
}

/// Whole-experiment configuration, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub auction: AuctionConfig,
    #[serde(default)]
    pub bidders: BidderConfig,
    pub graph: GraphConfig,
    #[serde(default)]
    pub idm: IdmConfig,
    #[serde(default)]
    pub belief: BeliefConfig,
    pub ldm: LdmConfig,
    pub align: AlignConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: SeedConfig,
}


impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.auction.validate()?;
        self.bidders.validate()?;
        self.graph.validate()?;
        self.ldm.validate()?;
        self.align.validate()?;
        if self.align.controlled.iter().any(|&a| a >= self.auction.agents) {
            return Err(Error::Config("align.controlled names an agent outside the auction".into()));
        }
        if self.eval.split >= self.ldm.window {
            return Err(Error::Config(format!("eval.split {} must be below the window {}", self.eval.split, self.ldm.window)));
        }
        if self.ldm.window > self.auction.horizon + 1 {
            return Err(Error::Config("ldm.window exceeds the episode length".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn forecast_split(&self) -> usize {
        if self.eval.split == 0 { self.ldm.window / 2 } else { self.eval.split }
    }
}
