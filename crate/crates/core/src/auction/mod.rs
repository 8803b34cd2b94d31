//! Synthetic multi-agent ad auctions: IO generation, allocation rules,
//! stepping, episode records and KPIs.

pub mod config;
pub mod env;
pub mod kpi;
pub mod mechanism;
pub mod record;

pub use config::AuctionConfig;
pub use env::{
    generate_ios, generate_profiles, subseed, AgentProfile, AgentState, AgentStep, AuctionEnv, Bid,
    ImpressionOpportunity, IoOutcome, StepOutcome, StepView,
};
pub use kpi::{compute_kpis, AgentKpi, KpiReport};
pub use mechanism::{allocate_and_price, rank_bids, AllocationRule, Placement};
pub use record::{
    check_disjoint, config_hash, load_dataset, read_shard, run_episode, write_shard, EpisodeRecord, Manifest,
    ShardInfo, StepRecord,
};
