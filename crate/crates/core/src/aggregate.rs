//! Per-feature aggregation: group-by, sigma outlier removal, empirical-Bayes
//! prior computation, and posterior-adjusted CTR/cost/CPM.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::domain::{AdjustedMetrics, FeatureCombination, FeatureStats, Money, Prior};
use crate::error::PipelineError;

/// The grouping dimensions of a feature combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureField {
    SiteDomain,
    DeviceType,
    Size,
    FoldPosition,
    Geo,
    OperatingSystem,
    Browser,
    SellerMemberId,
    TagId,
    PublisherId,
}

impl FeatureField {
    pub const ALL: [FeatureField; 10] = [
        FeatureField::SiteDomain,
        FeatureField::DeviceType,
        FeatureField::Size,
        FeatureField::FoldPosition,
        FeatureField::Geo,
        FeatureField::OperatingSystem,
        FeatureField::Browser,
        FeatureField::SellerMemberId,
        FeatureField::TagId,
        FeatureField::PublisherId,
    ];

    pub fn parse(s: &str) -> Result<FeatureField, PipelineError> {
        Ok(match s {
            "site_domain" => FeatureField::SiteDomain,
            "device_type" => FeatureField::DeviceType,
            "size" => FeatureField::Size,
            "fold_position" => FeatureField::FoldPosition,
            "geo" => FeatureField::Geo,
            "operating_system" => FeatureField::OperatingSystem,
            "browser" => FeatureField::Browser,
            "seller_member_id" => FeatureField::SellerMemberId,
            "tag_id" => FeatureField::TagId,
            "publisher_id" => FeatureField::PublisherId,
            other => {
                return Err(PipelineError::Config(format!("unknown grouping field {other:?}")))
            }
        })
    }
}

/// Which per-feature quantity the sigma rule is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutlierMetric {
    #[default]
    Impressions,
    Ctr,
}

#[derive(Debug, Clone)]
pub struct AggregationConfig {
    pub outlier_sigma: f64,
    pub outlier_metric: OutlierMetric,
    pub grouping_fields: Vec<FeatureField>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            outlier_sigma: 2.0,
            outlier_metric: OutlierMetric::Impressions,
            grouping_fields: FeatureField::ALL.to_vec(),
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.grouping_fields.is_empty() {
            return Err(PipelineError::Config("grouping fields must be non-empty".into()));
        }
        if !(self.outlier_sigma > 0.0) {
            return Err(PipelineError::Config(format!(
                "outlier sigma must be > 0, got {}",
                self.outlier_sigma
            )));
        }
        Ok(())
    }
}

/// Project a key onto the configured grouping fields; unselected fields are
/// blanked so distinct values collapse into one group.
pub fn project_key(key: &FeatureCombination, fields: &[FeatureField]) -> FeatureCombination {
    let mut projected = FeatureCombination::default();
    for field in fields {
        match field {
            FeatureField::SiteDomain => projected.site_domain = key.site_domain.clone(),
            FeatureField::DeviceType => projected.device_type = key.device_type.clone(),
            FeatureField::Size => projected.size = key.size.clone(),
            FeatureField::FoldPosition => projected.fold_position = key.fold_position.clone(),
            FeatureField::Geo => projected.geo = key.geo.clone(),
            FeatureField::OperatingSystem => {
                projected.operating_system = key.operating_system.clone()
            }
            FeatureField::Browser => projected.browser = key.browser.clone(),
            FeatureField::SellerMemberId => {
                projected.seller_member_id = key.seller_member_id.clone()
            }
            FeatureField::TagId => projected.tag_id = key.tag_id.clone(),
            FeatureField::PublisherId => projected.publisher_id = key.publisher_id.clone(),
        }
    }
    projected
}

/// Group events into per-feature stats: impressions = row count,
/// clicks = Σ is_click, cost = Σ cost. Output sorted by key.
///
/// Counts and costs are exact integers, so any partitioning of the input
/// reduces to the same result; rayon is free to split the work.
pub fn group_stats(
    rows: &[(FeatureCombination, u8, Money)],
    config: &AggregationConfig,
) -> Vec<FeatureStats> {
    let maps: Vec<HashMap<FeatureCombination, (u64, u64, Money)>> = rows
        .par_chunks(64 * 1024)
        .map(|chunk| {
            let mut map: HashMap<FeatureCombination, (u64, u64, Money)> = HashMap::new();
            for (key, is_click, cost) in chunk {
                let projected = project_key(key, &config.grouping_fields);
                let entry = map.entry(projected).or_insert((0, 0, Money::ZERO));
                entry.0 += 1;
                entry.1 += u64::from(*is_click);
                entry.2 += *cost;
            }
            map
        })
        .collect();

    let mut merged: HashMap<FeatureCombination, (u64, u64, Money)> = HashMap::new();
    for map in maps {
        for (key, (imps, clicks, cost)) in map {
            let entry = merged.entry(key).or_insert((0, 0, Money::ZERO));
            entry.0 += imps;
            entry.1 += clicks;
            entry.2 += cost;
        }
    }

    let mut stats: Vec<FeatureStats> = merged
        .into_iter()
        .map(|(key, (impressions, clicks, cost))| FeatureStats {
            key,
            impressions,
            clicks,
            cost,
        })
        .collect();
    stats.sort_by(|a, b| a.key.cmp(&b.key));
    stats
}

/// Monoid merge of two already-grouped stat sets, used by incremental
/// updates in the simulator.
pub fn merge_stats(a: &[FeatureStats], b: &[FeatureStats]) -> Vec<FeatureStats> {
    let mut merged: HashMap<FeatureCombination, (u64, u64, Money)> = HashMap::new();
    for s in a.iter().chain(b) {
        let entry = merged.entry(s.key.clone()).or_insert((0, 0, Money::ZERO));
        entry.0 += s.impressions;
        entry.1 += s.clicks;
        entry.2 += s.cost;
    }
    let mut out: Vec<FeatureStats> = merged
        .into_iter()
        .map(|(key, (impressions, clicks, cost))| FeatureStats {
            key,
            impressions,
            clicks,
            cost,
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

fn outlier_value(stats: &FeatureStats, metric: OutlierMetric) -> f64 {
    match metric {
        OutlierMetric::Impressions => stats.impressions as f64,
        OutlierMetric::Ctr => {
            if stats.impressions == 0 {
                0.0
            } else {
                stats.clicks as f64 / stats.impressions as f64
            }
        }
    }
}

/// Retain features within `sigma` population standard deviations of the
/// mean; the boundary is inclusive. Zero spread retains everything.
pub fn remove_outliers(
    stats: Vec<FeatureStats>,
    sigma: f64,
    metric: OutlierMetric,
) -> Vec<FeatureStats> {
    if stats.is_empty() {
        return stats;
    }
    let n = stats.len() as f64;
    let mean = stats.iter().map(|s| outlier_value(s, metric)).sum::<f64>() / n;
    let var = stats
        .iter()
        .map(|s| (outlier_value(s, metric) - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return stats;
    }
    stats
        .into_iter()
        .filter(|s| (outlier_value(s, metric) - mean).abs() <= sigma * sd)
        .collect()
}

/// Population averages over feature combinations: the pseudo-count prior.
/// prior_cpm is the impression-weighted cost rate over all features.
pub fn compute_prior(stats: &[FeatureStats]) -> Result<Prior, PipelineError> {
    if stats.is_empty() {
        return Err(PipelineError::PriorUnavailable);
    }
    let n = stats.len() as f64;
    let total_imps: u64 = stats.iter().map(|s| s.impressions).sum();
    let total_clicks: u64 = stats.iter().map(|s| s.clicks).sum();
    let total_cost: Money = stats.iter().map(|s| s.cost).fold(Money::ZERO, |a, b| a + b);
    let prior_cpm = if total_imps == 0 {
        0.0
    } else {
        total_cost.to_usd() / total_imps as f64 * 1000.0
    };
    Prior::new(total_clicks as f64 / n, total_imps as f64 / n, prior_cpm)
}

/// Posterior mean click probability: (prior clicks + clicks) divided by
/// (prior impressions + impressions).
pub fn adjusted_ctr(prior: &Prior, stats: &FeatureStats) -> Result<f64, PipelineError> {
    let denom = prior.prior_impressions + stats.impressions as f64;
    if denom <= 0.0 {
        return Err(PipelineError::DegenerateFeature);
    }
    Ok((prior.prior_clicks + stats.clicks as f64) / denom)
}

/// Prior-smoothed cost rate: returns (adjusted cost USD, adjusted
/// impressions, adjusted CPM USD). Both the prior and the feature
/// contribute cost as `cpm * impressions / 1000` so the blend stays in USD.
pub fn adjusted_cpm(prior: &Prior, stats: &FeatureStats) -> Result<(f64, f64, f64), PipelineError> {
    let adjusted_imps = prior.prior_impressions + stats.impressions as f64;
    if adjusted_imps <= 0.0 {
        return Err(PipelineError::DegenerateFeature);
    }
    let adjusted_cost = prior.prior_cpm_usd * prior.prior_impressions / 1000.0 + stats.cost.to_usd();
    let adjusted_cpm = adjusted_cost / adjusted_imps * 1000.0;
    Ok((adjusted_cost, adjusted_imps, adjusted_cpm))
}

/// Convenience: the full adjusted-metric bundle for one feature.
pub fn adjusted_metrics(prior: &Prior, stats: &FeatureStats) -> Result<AdjustedMetrics, PipelineError> {
    let ctr = adjusted_ctr(prior, stats)?;
    let (cost, imps, cpm) = adjusted_cpm(prior, stats)?;
    AdjustedMetrics::new(ctr, cost, imps, cpm)
}

/// Debug dump of grouped stats with their adjusted metrics, one row per
/// feature, sorted by key.
pub fn write_aggregates(
    out: impl std::io::Write,
    stats: &[FeatureStats],
    prior: &Prior,
) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "site_domain",
        "device_type",
        "size",
        "fold_position",
        "geo",
        "operating_system",
        "browser",
        "seller_member_id",
        "tag_id",
        "publisher_id",
        "impressions",
        "clicks",
        "cost_usd",
        "adjusted_ctr",
        "adjusted_cpm_usd",
    ])?;
    let mut sorted: Vec<&FeatureStats> = stats.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    for s in sorted {
        let metrics = adjusted_metrics(prior, s)?;
        let mut record: Vec<String> = s.key.fields().iter().map(|f| f.to_string()).collect();
        record.push(s.impressions.to_string());
        record.push(s.clicks.to_string());
        record.push(s.cost.to_string());
        record.push(crate::domain::format_rounded(metrics.adjusted_ctr, 6));
        record.push(crate::domain::format_rounded(metrics.adjusted_cpm_usd, 6));
        writer.write_record(record)?;
    }
    writer.flush()?;
    Ok(())
}
