use serde::{Deserialize, Serialize};

use super::mechanism::AllocationRule;
use crate::error::{Error, Result};

/// Parameters of the synthetic auction generator and environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuctionConfig {
    pub agents: usize,
    pub horizon: usize,
    /// Mean number of IO arrivals per step (Poisson).
    pub arrival_rate: f64,
    /// Mean lifecycle length in steps (geometric, at least one step).
    pub lifecycle_mean: f64,
    /// Slots per IO are drawn uniformly from `1..=max_slots`.
    pub max_slots: usize,
    /// Probability that a given agent is exposed to a given IO.
    pub exposure_prob: f64,
    /// Log-normal base value of an IO.
    pub base_value_mu: f64,
    pub base_value_sigma: f64,
    /// Log-normal per-agent multiplier applied to the base value.
    pub agent_value_sigma: f64,
    pub categories: usize,
    pub budget_min: f64,
    pub budget_max: f64,
    pub rule: AllocationRule,
    pub hard_budget: bool,
    pub stochastic_conversions: bool,
    /// Conversion probability in stochastic mode; a conversion credits
    /// `value / conversion_prob` so the expectation matches the stored value.
    pub conversion_prob: f64,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        Self {
            agents: 4,
            horizon: 32,
            arrival_rate: 6.0,
            lifecycle_mean: 2.0,
            max_slots: 2,
            exposure_prob: 0.6,
            base_value_mu: 0.0,
            base_value_sigma: 0.5,
            agent_value_sigma: 0.3,
            categories: 3,
            budget_min: 40.0,
            budget_max: 120.0,
            rule: AllocationRule::Fpa,
            hard_budget: false,
            stochastic_conversions: false,
            conversion_prob: 0.5,
        }
    }
}

impl AuctionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.agents == 0 {
            return bad("agents must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return bad(format!("arrival_rate must be finite and >= 0, got {}", self.arrival_rate));
        }
        if !(self.lifecycle_mean >= 1.0 && self.lifecycle_mean.is_finite()) {
            return bad(format!("lifecycle_mean must be >= 1, got {}", self.lifecycle_mean));
        }
        if self.max_slots == 0 {
            return bad("max_slots must be at least 1".into());
        }
        if !(self.exposure_prob > 0.0 && self.exposure_prob <= 1.0) {
            return bad(format!("exposure_prob must lie in (0, 1], got {}", self.exposure_prob));
        }
        if !self.base_value_mu.is_finite() || !(self.base_value_sigma >= 0.0) || !(self.agent_value_sigma >= 0.0) {
            return bad("value distribution parameters must be finite with sigma >= 0".into());
        }
        if self.categories == 0 {
            return bad("categories must be at least 1".into());
        }
        if !(self.budget_min > 0.0 && self.budget_max >= self.budget_min && self.budget_max.is_finite()) {
            return bad(format!(
                "budget range must satisfy 0 < min <= max, got [{}, {}]",
                self.budget_min, self.budget_max
            ));
        }
        if !(self.conversion_prob > 0.0 && self.conversion_prob <= 1.0) {
            return bad(format!("conversion_prob must lie in (0, 1], got {}", self.conversion_prob));
        }
        Ok(())
    }

    /// Log-scale spread of an agent's value for an IO.
    pub fn value_sigma(&self) -> f64 {
        (self.base_value_sigma.powi(2) + self.agent_value_sigma.powi(2)).sqrt()
    }

    /// Boundaries splitting the per-agent value distribution into `bins`
    /// equal-probability bins.
    pub fn value_quantiles(&self, bins: usize) -> Vec<f64> {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        let sigma = self.value_sigma();
        (1..bins)
            .map(|k| (self.base_value_mu + sigma * n.inverse_cdf(k as f64 / bins as f64)).exp())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        AuctionConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_distribution_parameters_rejected() {
        for cfg in [
            AuctionConfig { arrival_rate: -1.0, ..Default::default() },
            AuctionConfig { lifecycle_mean: 0.5, ..Default::default() },
            AuctionConfig { exposure_prob: 0.0, ..Default::default() },
            AuctionConfig { base_value_sigma: -0.1, ..Default::default() },
            AuctionConfig { budget_min: 0.0, ..Default::default() },
            AuctionConfig { max_slots: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn quartile_boundaries_straddle_the_median() {
        let cfg = AuctionConfig::default();
        let q = cfg.value_quantiles(4);
        assert_eq!(q.len(), 3);
        assert!((q[1] - cfg.base_value_mu.exp()).abs() < 1e-9);
        assert!(q[0] < q[1] && q[1] < q[2]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<AuctionConfig, _> = toml::from_str("agents = 2\nbogus = 1\n");
        assert!(r.is_err());
    }
}
