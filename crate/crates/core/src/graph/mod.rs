//! Bipartite agent/IO graphs, attention message passing, joint aggregation
//! and the self-predictive auxiliary loss.

pub mod build;
pub mod gnn;
pub mod model;

pub use build::{build_graph, graph_seed, AuctionGraph, FeatureSpec, GraphBatch, NodeKind};
pub use gnn::{ec_aggregate, encode, EcBlock, Gnn};
pub use model::{cosine_loss, spl_loss, EmbedOut, EpisodeEmbedding, GraphConfig, GraphModel};
