//! Bid assignment: adjusted CTR plus a target CPC gives the highest CPM we
//! can afford, scaled down by the optimization fraction.

use crate::error::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidPolicy {
    pub target_cpc_usd: f64,
    /// Multiplier in (0, 1]; values above 1 would defeat the CPC target,
    /// overly aggressive values under-deliver.
    pub optimization_fraction: f64,
    pub min_bid_cpm_usd: f64,
    pub max_bid_cpm_usd: f64,
}

impl BidPolicy {
    pub fn new(
        target_cpc_usd: f64,
        optimization_fraction: f64,
        min_bid_cpm_usd: f64,
        max_bid_cpm_usd: f64,
    ) -> Result<BidPolicy, PipelineError> {
        for (name, v) in [
            ("target_cpc", target_cpc_usd),
            ("optimization_fraction", optimization_fraction),
            ("min_bid_cpm", min_bid_cpm_usd),
            ("max_bid_cpm", max_bid_cpm_usd),
        ] {
            if !v.is_finite() {
                return Err(PipelineError::Config(format!("{name} must be finite")));
            }
        }
        if target_cpc_usd <= 0.0 {
            return Err(PipelineError::Config("target_cpc must be > 0".into()));
        }
        if !(optimization_fraction > 0.0 && optimization_fraction <= 1.0) {
            return Err(PipelineError::Config(format!(
                "optimization_fraction must be in (0, 1], got {optimization_fraction}"
            )));
        }
        if min_bid_cpm_usd < 0.0 || max_bid_cpm_usd <= 0.0 || min_bid_cpm_usd >= max_bid_cpm_usd {
            return Err(PipelineError::Config(
                "bid clamps must satisfy 0 <= min < max".into(),
            ));
        }
        Ok(BidPolicy {
            target_cpc_usd,
            optimization_fraction,
            min_bid_cpm_usd,
            max_bid_cpm_usd,
        })
    }

    /// Defaults: fraction 0.9, clamps [0.01, 20.00] USD CPM.
    pub fn with_target(target_cpc_usd: f64) -> Result<BidPolicy, PipelineError> {
        BidPolicy::new(target_cpc_usd, 0.9, 0.01, 20.0)
    }
}

/// The highest CPM worth paying at the given click probability:
/// `target_cpc * ctr * 1000 * fraction`, clamped to the policy bounds.
/// Monotone nondecreasing in `adjusted_ctr`.
pub fn max_bid_cpm(policy: &BidPolicy, adjusted_ctr: f64) -> f64 {
    let raw = policy.target_cpc_usd * adjusted_ctr * 1000.0 * policy.optimization_fraction;
    raw.clamp(policy.min_bid_cpm_usd, policy.max_bid_cpm_usd)
}

/// CPC realized at a given CPM if the click rate holds: `cpm / (ctr * 1000)`.
pub fn expected_cpc(bid_cpm_usd: f64, adjusted_ctr: f64) -> Result<f64, PipelineError> {
    if adjusted_ctr <= 0.0 {
        return Err(PipelineError::NoClickSignal);
    }
    Ok(bid_cpm_usd / (adjusted_ctr * 1000.0))
}
