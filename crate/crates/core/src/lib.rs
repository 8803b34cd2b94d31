pub mod align;
pub mod auction;
pub mod belief;
pub mod bidders;
pub mod error;
pub mod graph;
pub mod harness;
pub mod idm;
pub mod ldm;
pub mod numkit;

pub use error::{Error, Result};
