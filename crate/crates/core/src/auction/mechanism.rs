//! Slot allocation and pricing for first-price, generalized second-price and
//! VCG auctions with identical slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationRule {
    Fpa,
    Gsp,
    Vcg,
}

impl AllocationRule {
    pub const ALL: [AllocationRule; 3] = [AllocationRule::Fpa, AllocationRule::Gsp, AllocationRule::Vcg];
}

impl std::str::FromStr for AllocationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpa" => Ok(Self::Fpa),
            "gsp" => Ok(Self::Gsp),
            "vcg" => Ok(Self::Vcg),
            other => Err(Error::Config(format!("unknown allocation rule {other:?}"))),
        }
    }
}

/// One winning slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub agent: usize,
    pub bid: f64,
    pub price: f64,
}

/// Bids sorted by amount, highest first; equal bids go to the lower agent id.
pub fn rank_bids(bids: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut ranked = bids.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Winners in rank order with their prices.
///
/// Only positive bids can win. Under GSP the winner at rank `r` pays the bid
/// at rank `r+1`; under VCG with identical slots every winner pays the
/// `(slots+1)`-th highest bid, which is the welfare externality it imposes.
pub fn allocate_and_price(bids: &[(usize, f64)], slots: usize, rule: AllocationRule) -> Result<Vec<Placement>> {
    for &(agent, b) in bids {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::Input(format!("agent {agent} submitted invalid bid {b}")));
        }
    }
    let ranked = rank_bids(bids);
    let bid_at = |r: usize| ranked.get(r).map_or(0.0, |x| x.1);
    let winners = ranked.iter().take(slots).take_while(|(_, b)| *b > 0.0);
    Ok(winners
        .enumerate()
        .map(|(r, &(agent, bid))| {
            let price = match rule {
                AllocationRule::Fpa => bid,
                AllocationRule::Gsp => bid_at(r + 1),
                AllocationRule::Vcg => bid_at(slots),
            };
            Placement { agent, bid, price }
        })
        .collect())
}
