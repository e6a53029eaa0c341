//! Final recommendation assembly: CTR-ranked network selection under an
//! impression budget, merge with the full campaign set, and export.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::domain::{format_rounded, BidRecommendation, FeatureCombination};
use crate::error::PipelineError;

#[derive(Debug, Clone, Copy)]
pub struct MergeConfig {
    /// Share of requested scale served from network features; default 0.30.
    pub network_scale_fraction: f64,
    /// Cumulative-impression budget for the network top slice; default 100K.
    pub top_impression_budget: u64,
    /// Target weekly impressions; mandatory, no default.
    pub requested_scale: u64,
}

impl MergeConfig {
    pub fn new(
        network_scale_fraction: f64,
        top_impression_budget: u64,
        requested_scale: u64,
    ) -> Result<MergeConfig, PipelineError> {
        if !(0.0..=1.0).contains(&network_scale_fraction) {
            return Err(PipelineError::Config(format!(
                "network_scale_fraction must be in [0,1], got {network_scale_fraction}"
            )));
        }
        Ok(MergeConfig {
            network_scale_fraction,
            top_impression_budget,
            requested_scale,
        })
    }
}

/// Ranking order for selection: adjusted CTR descending, ties broken by
/// higher impressions, then key order.
pub fn rank_order(a: &BidRecommendation, b: &BidRecommendation) -> Ordering {
    b.metrics
        .adjusted_ctr
        .total_cmp(&a.metrics.adjusted_ctr)
        .then_with(|| b.historical_impressions.cmp(&a.historical_impressions))
        .then_with(|| a.key.cmp(&b.key))
}

/// Greedy prefix of the CTR-ranked recommendations whose cumulative
/// historical impressions reach `budget`; the crossing feature is included.
/// Returns the selection and whether the budget could not be covered.
pub fn select_network_features(
    mut recs: Vec<BidRecommendation>,
    budget: u64,
) -> (Vec<BidRecommendation>, bool) {
    recs.sort_by(rank_order);
    if budget == 0 {
        return (Vec::new(), false);
    }
    let mut cumulative: u64 = 0;
    let mut selected = Vec::new();
    for rec in recs {
        cumulative += rec.historical_impressions;
        selected.push(rec);
        if cumulative >= budget {
            return (selected, false);
        }
    }
    // Ran out of inventory before the budget was met.
    (selected, true)
}

/// Merge the network slice with the full campaign set. Network features are
/// taken in CTR order until they cover `network_scale_fraction *
/// requested_scale` historical impressions; the campaign set is never
/// filtered. On key collision the campaign entry wins.
pub fn merge_recommendations(
    network: Vec<BidRecommendation>,
    campaign: Vec<BidRecommendation>,
    cfg: &MergeConfig,
) -> Vec<BidRecommendation> {
    let network_budget = cfg.network_scale_fraction * cfg.requested_scale as f64;
    let campaign_keys: HashSet<&FeatureCombination> = campaign.iter().map(|r| &r.key).collect();

    let mut ranked = network;
    ranked.sort_by(rank_order);
    let mut out = Vec::new();
    let mut cumulative = 0.0;
    for rec in ranked {
        if cumulative >= network_budget {
            break;
        }
        cumulative += rec.historical_impressions as f64;
        if !campaign_keys.contains(&rec.key) {
            out.push(rec);
        }
    }
    out.extend(campaign);
    out
}

/// Deterministic CSV export: bid descending then key, bid rounded half-even
/// to 3 decimals, adjusted CTR to 6.
pub fn export_recommendations(
    out: impl Write,
    recs: &[BidRecommendation],
) -> Result<(), PipelineError> {
    if recs.is_empty() {
        return Err(PipelineError::EmptyRecommendationSet);
    }
    let mut sorted: Vec<&BidRecommendation> = recs.iter().collect();
    sorted.sort_by(|a, b| {
        b.bid_cpm_usd
            .total_cmp(&a.bid_cpm_usd)
            .then_with(|| a.key.cmp(&b.key))
    });

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
        "source",
        "adjusted_ctr",
        "bid_cpm_usd",
    ])?;
    for rec in sorted {
        let key = &rec.key;
        writer.write_record([
            key.site_domain.as_str(),
            key.device_type.as_str(),
            key.size.as_str(),
            key.fold_position.as_str(),
            key.geo.as_str(),
            key.operating_system.as_str(),
            key.browser.as_str(),
            key.seller_member_id.as_str(),
            key.tag_id.as_str(),
            key.publisher_id.as_str(),
            rec.source.as_str(),
            &format_rounded(rec.metrics.adjusted_ctr, 6),
            &format_rounded(rec.bid_cpm_usd, 3),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// File export with no partial output: writes to a temp sibling, then
/// renames into place.
pub fn export_recommendations_to_path(
    path: &Path,
    recs: &[BidRecommendation],
) -> Result<(), PipelineError> {
    let tmp = path.with_extension("csv.tmp");
    let result = (|| {
        let file = fs::File::create(&tmp)?;
        export_recommendations(file, recs)
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AdjustedMetrics, RecommendationSource};

    fn rec(domain: &str, ctr: f64, imps: u64, bid: f64, source: RecommendationSource) -> BidRecommendation {
        BidRecommendation {
            key: FeatureCombination {
                site_domain: domain.into(),
                ..Default::default()
            },
            metrics: AdjustedMetrics {
                adjusted_ctr: ctr,
                adjusted_cost_usd: 1.0,
                adjusted_impressions: imps.max(1) as f64,
                adjusted_cpm_usd: 1.0,
            },
            bid_cpm_usd: bid,
            source,
            campaign_id: "C1".into(),
            historical_impressions: imps,
        }
    }

    fn net(domain: &str, ctr: f64, imps: u64) -> BidRecommendation {
        rec(domain, ctr, imps, 1.0, RecommendationSource::Network)
    }

    #[test]
    fn greedy_selection_includes_crossing_feature() {
        let recs = vec![net("a", 0.003, 60_000), net("b", 0.002, 30_000), net("c", 0.001, 30_000)];
        let (sel, warn) = select_network_features(recs.clone(), 100_000);
        assert!(!warn);
        // 60K + 30K < 100K, the third feature crosses the threshold.
        assert_eq!(sel.len(), 3);

        let (sel, _) = select_network_features(recs, 90_000);
        assert_eq!(sel.len(), 2);
        assert_eq!(sel[0].key.site_domain, "a");
        assert_eq!(sel[1].key.site_domain, "b");
    }

    #[test]
    fn budget_zero_selects_nothing() {
        let (sel, warn) = select_network_features(vec![net("a", 0.01, 1000)], 0);
        assert!(sel.is_empty());
        assert!(!warn);
    }

    #[test]
    fn single_feature_crossing_threshold() {
        let (sel, warn) = select_network_features(vec![net("a", 0.01, 200_000)], 100_000);
        assert_eq!(sel.len(), 1);
        assert!(!warn);
    }

    #[test]
    fn insufficient_inventory_returns_all_with_warning() {
        let (sel, warn) = select_network_features(vec![net("a", 0.01, 10)], 100_000);
        assert_eq!(sel.len(), 1);
        assert!(warn);
    }

    #[test]
    fn selection_is_ctr_prefix() {
        let recs = vec![net("low", 0.001, 500_000), net("high", 0.005, 500)];
        let (sel, _) = select_network_features(recs, 400);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].key.site_domain, "high");
    }

    #[test]
    fn merge_covers_network_share_and_all_campaign() {
        let network: Vec<_> = (0..10)
            .map(|i| net(&format!("n{i}"), 0.01 - i as f64 * 0.0001, 100_000))
            .collect();
        let campaign = vec![rec("c1", 0.002, 500, 0.5, RecommendationSource::Campaign)];
        let cfg = MergeConfig::new(0.3, 100_000, 1_000_000).unwrap();
        let out = merge_recommendations(network, campaign, &cfg);
        // 300K of scale => three 100K network features, plus the campaign one.
        let nets = out.iter().filter(|r| r.source == RecommendationSource::Network).count();
        assert_eq!(nets, 3);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn zero_network_fraction_yields_campaign_only() {
        let network = vec![net("n", 0.01, 1000)];
        let campaign = vec![rec("c", 0.002, 500, 0.5, RecommendationSource::Campaign)];
        let cfg = MergeConfig::new(0.0, 100_000, 1_000_000).unwrap();
        let out = merge_recommendations(network, campaign.clone(), &cfg);
        assert_eq!(out, campaign);
    }

    #[test]
    fn collision_prefers_campaign_entry() {
        let network = vec![net("dup", 0.01, 1000)];
        let campaign = vec![rec("dup", 0.002, 500, 0.5, RecommendationSource::Campaign)];
        let cfg = MergeConfig::new(1.0, 100_000, 1_000_000).unwrap();
        let out = merge_recommendations(network, campaign, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source, RecommendationSource::Campaign);
    }

    #[test]
    fn export_orders_and_rounds() {
        let recs = vec![
            rec("low", 0.001, 100, 0.4, RecommendationSource::Campaign),
            rec("high", 0.002, 100, 1.8815, RecommendationSource::Network),
        ];
        let mut buf = Vec::new();
        export_recommendations(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("high"));
        assert!(lines[1].ends_with("1.882"), "line was {:?}", lines[1]);
        assert!(lines[2].ends_with("0.400"));
    }

    #[test]
    fn export_empty_is_error() {
        let mut buf = Vec::new();
        assert!(matches!(
            export_recommendations(&mut buf, &[]),
            Err(PipelineError::EmptyRecommendationSet)
        ));
    }

    #[test]
    fn export_is_deterministic() {
        let recs = vec![
            rec("a", 0.001, 100, 0.4, RecommendationSource::Campaign),
            rec("b", 0.002, 100, 1.8815, RecommendationSource::Network),
        ];
        let mut one = Vec::new();
        let mut two = Vec::new();
        export_recommendations(&mut one, &recs).unwrap();
        export_recommendations(&mut two, &recs).unwrap();
        assert_eq!(one, two);
    }
}
