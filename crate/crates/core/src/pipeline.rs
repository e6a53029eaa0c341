//! End-to-end orchestration for the CLI commands: feed ingestion through
//! recommendation export, the aggregate debug dump, and the simulator
//! comparison run.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use crate::aggregate::{
    adjusted_metrics, compute_prior, group_stats, remove_outliers, write_aggregates,
};
use crate::bidder::{max_bid_cpm, BidPolicy};
use crate::config::RunConfig;
use crate::domain::{
    format_rounded, BidRecommendation, FeatureCombination, FeatureStats, Money, Prior,
    RecommendationSource,
};
use crate::error::PipelineError;
use crate::ingest::{derive_features, parse_feed, split_network_campaign, write_rejects, ParseOutcome};
use crate::recommend::{
    export_recommendations_to_path, merge_recommendations, select_network_features, MergeConfig,
};
use crate::simulate::{
    baseline_uniform_bidder, read_market, run_feedback_loop, simulate_week, tune_flat_bid,
    week_seed, write_trajectory, MarketModel, WeeklyOutcome, GENERATOR_NAME,
};

/// Everything `recommend` produced, for reporting and tests.
#[derive(Debug)]
pub struct RecommendOutput {
    pub recommendation_paths: Vec<PathBuf>,
    pub report_path: PathBuf,
    pub rejects_path: PathBuf,
    pub rows_total: u64,
    pub rows_accepted: u64,
    pub rows_rejected: u64,
    pub network_features: usize,
    pub campaign_features: usize,
    pub campaign_cold_start: bool,
    pub warnings: Vec<String>,
}

type Event = (FeatureCombination, u8, Money);

fn ingest_feeds(config: &RunConfig) -> Result<(ParseOutcome, ParseOutcome), PipelineError> {
    let impressions = fs::File::open(&config.impressions_path)?;
    let clicks = fs::File::open(&config.clicks_path)?;
    let imp_out = parse_feed(impressions, &config.schema, &config.filter)?;
    let click_out = parse_feed(clicks, &config.schema, &config.filter)?;
    Ok((imp_out, click_out))
}

fn bid_set(
    stats: &[FeatureStats],
    prior: &Prior,
    policy: &BidPolicy,
    source: RecommendationSource,
    campaign_id: &str,
) -> Result<Vec<BidRecommendation>, PipelineError> {
    stats
        .iter()
        .map(|s| {
            let metrics = adjusted_metrics(prior, s)?;
            Ok(BidRecommendation {
                key: s.key.clone(),
                bid_cpm_usd: max_bid_cpm(policy, metrics.adjusted_ctr),
                metrics,
                source,
                campaign_id: campaign_id.to_string(),
                historical_impressions: s.impressions,
            })
        })
        .collect()
}

fn output_date(config: &RunConfig) -> String {
    match config.filter.window_end {
        Some(end) => end.format("%Y%m%d").to_string(),
        None => "latest".to_string(),
    }
}

/// The full per-campaign sequence: ingest, network and campaign
/// aggregation, priors, bids, merge, export, report.
pub fn run_recommend(config: &RunConfig) -> Result<RecommendOutput, PipelineError> {
    config.validate(true)?;
    let requested_scale = config.requested_scale.ok_or_else(|| {
        PipelineError::Config("requested_scale is required for recommend".into())
    })?;
    fs::create_dir_all(&config.output_dir)?;

    let (imp_out, click_out) = ingest_feeds(config)?;
    let rows_total = (imp_out.rows.len()
        + imp_out.rejects.len()
        + click_out.rows.len()
        + click_out.rejects.len()) as u64;
    let rows: Vec<_> = imp_out.rows.iter().chain(&click_out.rows).cloned().collect();
    let rows_accepted = rows.len() as u64;
    let rows_rejected = (imp_out.rejects.len() + click_out.rejects.len()) as u64;

    let rejects_path = config.output_dir.join("rejects.csv");
    let all_rejects: Vec<_> = imp_out.rejects.iter().chain(&click_out.rejects).cloned().collect();
    write_rejects(fs::File::create(&rejects_path)?, &all_rejects)?;

    if rows.is_empty() {
        return Err(PipelineError::Data("zero accepted rows after ingest filters".into()));
    }

    let mut warnings = Vec::new();

    let (network_rows, campaign_rows) = split_network_campaign(&rows, &config.campaign_id)?;
    let to_events = |rows: &[&crate::ingest::RawEventRow]| -> Vec<Event> {
        rows.iter().map(|r| derive_features(r)).collect()
    };
    let network_events = to_events(&network_rows);
    let campaign_events = to_events(&campaign_rows);

    // Network side: group, trim outliers, prior, bids, top slice.
    let network_stats = remove_outliers(
        group_stats(&network_events, &config.aggregation),
        config.aggregation.outlier_sigma,
        config.aggregation.outlier_metric,
    );
    let network_prior = compute_prior(&network_stats)?;

    // Campaign side: same steps with the campaign's own prior, falling back
    // to the network prior on a cold start.
    let campaign_stats = remove_outliers(
        group_stats(&campaign_events, &config.aggregation),
        config.aggregation.outlier_sigma,
        config.aggregation.outlier_metric,
    );
    let campaign_cold_start = campaign_stats.is_empty();
    let campaign_prior = match compute_prior(&campaign_stats) {
        Ok(p) => p,
        Err(PipelineError::PriorUnavailable) => {
            warnings.push("campaign has no history; using the network prior".to_string());
            network_prior
        }
        Err(e) => return Err(e),
    };

    let date = output_date(config);
    let mut recommendation_paths = Vec::new();
    let mut report = String::new();
    let multi = config.optimization_fractions.len() > 1;

    let mut first_counts: Option<(usize, usize)> = None;
    for fraction in &config.optimization_fractions {
        let policy = BidPolicy::new(
            config.target_cpc,
            *fraction,
            config.min_bid_cpm,
            config.max_bid_cpm,
        )?;

        let network_bids = bid_set(
            &network_stats,
            &network_prior,
            &policy,
            RecommendationSource::Network,
            &config.campaign_id,
        )?;
        let (network_top, short) =
            select_network_features(network_bids, config.top_impression_budget);
        if short {
            warnings.push(format!(
                "network inventory below top_impression_budget ({})",
                config.top_impression_budget
            ));
        }

        let campaign_bids = bid_set(
            &campaign_stats,
            &campaign_prior,
            &policy,
            RecommendationSource::Campaign,
            &config.campaign_id,
        )?;

        let merge_cfg = MergeConfig::new(
            config.network_scale_fraction,
            config.top_impression_budget,
            requested_scale,
        )?;
        let merged = merge_recommendations(network_top, campaign_bids, &merge_cfg);
        let network_count = merged
            .iter()
            .filter(|r| r.source == RecommendationSource::Network)
            .count();
        let campaign_count = merged.len() - network_count;
        first_counts.get_or_insert((network_count, campaign_count));

        let filename = if multi {
            format!(
                "recommendations_{}_{}_f{}.csv",
                config.campaign_id,
                date,
                format_rounded(*fraction, 2)
            )
        } else {
            format!("recommendations_{}_{}.csv", config.campaign_id, date)
        };
        let path = config.output_dir.join(filename);
        export_recommendations_to_path(&path, &merged)?;
        recommendation_paths.push(path);
    }
    warnings.dedup();

    let (network_features, campaign_features) = first_counts.unwrap_or((0, 0));
    writeln!(report, "run: recommend").unwrap();
    writeln!(report, "campaign_id: {}", config.campaign_id).unwrap();
    writeln!(report, "config_hash: {}", config.config_hash()).unwrap();
    writeln!(report, "rows_total: {rows_total}").unwrap();
    writeln!(report, "rows_accepted: {rows_accepted}").unwrap();
    writeln!(report, "rows_rejected: {rows_rejected}").unwrap();
    writeln!(report, "network_features: {network_features}").unwrap();
    writeln!(report, "campaign_features: {campaign_features}").unwrap();
    writeln!(report, "campaign_cold_start: {campaign_cold_start}").unwrap();
    writeln!(
        report,
        "network_prior: clicks={} impressions={} cpm={}",
        format_rounded(network_prior.prior_clicks, 6),
        format_rounded(network_prior.prior_impressions, 6),
        format_rounded(network_prior.prior_cpm_usd, 6)
    )
    .unwrap();
    writeln!(
        report,
        "campaign_prior: clicks={} impressions={} cpm={}",
        format_rounded(campaign_prior.prior_clicks, 6),
        format_rounded(campaign_prior.prior_impressions, 6),
        format_rounded(campaign_prior.prior_cpm_usd, 6)
    )
    .unwrap();
    writeln!(
        report,
        "optimization_fraction: {}",
        config
            .optimization_fractions
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    writeln!(report, "requested_scale: {requested_scale}").unwrap();
    for w in &warnings {
        writeln!(report, "warning: {w}").unwrap();
    }
    if !config.deterministic {
        writeln!(report, "timestamp: {}", chrono::Utc::now().to_rfc3339()).unwrap();
    }

    let report_path = config.output_dir.join("run_report.txt");
    fs::write(&report_path, &report)?;

    Ok(RecommendOutput {
        recommendation_paths,
        report_path,
        rejects_path,
        rows_total,
        rows_accepted,
        rows_rejected,
        network_features,
        campaign_features,
        campaign_cold_start,
        warnings,
    })
}

/// Debug dump: network-level aggregates with adjusted metrics.
pub fn run_aggregate(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    config.validate(true)?;
    fs::create_dir_all(&config.output_dir)?;
    let (imp_out, click_out) = ingest_feeds(config)?;
    let events: Vec<Event> = imp_out
        .rows
        .iter()
        .chain(&click_out.rows)
        .map(derive_features)
        .collect();
    if events.is_empty() {
        return Err(PipelineError::Data("zero accepted rows after ingest filters".into()));
    }
    let stats = remove_outliers(
        group_stats(&events, &config.aggregation),
        config.aggregation.outlier_sigma,
        config.aggregation.outlier_metric,
    );
    let prior = compute_prior(&stats)?;
    let path = config.output_dir.join("aggregates.csv");
    write_aggregates(fs::File::create(&path)?, &stats, &prior)?;
    Ok(path)
}

#[derive(Debug)]
pub struct SimulateOutput {
    pub trajectory_path: PathBuf,
    pub report_path: PathBuf,
    pub recommended_weeks: Vec<WeeklyOutcome>,
    pub baseline_weeks: Vec<WeeklyOutcome>,
    pub flat_bid: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format_rounded(v, 6),
        None => "n/a".to_string(),
    }
}

/// Simulator comparison: the adaptive recommended arm against a uniform
/// flat-bid arm tuned to the same total spend. Both arms see the same
/// market randomness.
pub fn run_simulate(config: &RunConfig) -> Result<SimulateOutput, PipelineError> {
    let market_path = config
        .market_path
        .as_ref()
        .ok_or_else(|| PipelineError::Config("simulate requires a market file".into()))?;
    if !market_path.exists() {
        return Err(PipelineError::Config(format!(
            "market path does not exist: {}",
            market_path.display()
        )));
    }
    if config.weeks == 0 {
        return Err(PipelineError::Config("weeks must be >= 1".into()));
    }
    fs::create_dir_all(&config.output_dir)?;
    let market: MarketModel = read_market(fs::File::open(market_path)?)?;
    if market.features.is_empty() {
        return Err(PipelineError::Data("market file has no features".into()));
    }

    let fraction = config.optimization_fractions[0];
    let policy = BidPolicy::new(
        config.target_cpc,
        fraction,
        config.min_bid_cpm,
        config.max_bid_cpm,
    )?;

    let trajectory = run_feedback_loop(
        &market,
        Vec::new(),
        &policy,
        config.bootstrap_prior,
        config.weeks,
        config.seed,
    )?;
    let recommended_weeks: Vec<WeeklyOutcome> =
        trajectory.iter().map(|(_, o)| o.clone()).collect();
    let total_spend = recommended_weeks
        .iter()
        .map(WeeklyOutcome::cost)
        .fold(Money::ZERO, |a, b| a + b);

    let flat_bid = tune_flat_bid(&market, total_spend, config.weeks);
    let flat_bids = baseline_uniform_bidder(&market, flat_bid);
    let baseline_weeks: Vec<WeeklyOutcome> = (0..config.weeks)
        .map(|week| simulate_week(&market, &flat_bids, week_seed(config.seed, week)))
        .collect();

    let trajectory_path = config.output_dir.join("trajectory.csv");
    write_trajectory(fs::File::create(&trajectory_path)?, &trajectory)?;

    let mut report = String::new();
    writeln!(report, "run: simulate").unwrap();
    writeln!(report, "config_hash: {}", config.config_hash()).unwrap();
    writeln!(report, "market_features: {}", market.features.len()).unwrap();
    writeln!(report, "weeks: {}", config.weeks).unwrap();
    writeln!(report, "seed: {}", config.seed).unwrap();
    writeln!(report, "generator: {GENERATOR_NAME}").unwrap();
    writeln!(report, "optimization_fraction: {fraction}").unwrap();
    writeln!(report, "baseline_flat_bid_cpm: {}", format_rounded(flat_bid, 6)).unwrap();
    for (week, (rec, base)) in recommended_weeks.iter().zip(&baseline_weeks).enumerate() {
        writeln!(
            report,
            "week {week} recommended: imps={} clicks={} cost={} cpc={} cpm={} ctr={}",
            rec.impressions(),
            rec.clicks(),
            rec.cost(),
            fmt_opt(rec.cpc()),
            fmt_opt(rec.cpm()),
            fmt_opt(rec.ctr()),
        )
        .unwrap();
        writeln!(
            report,
            "week {week} baseline:    imps={} clicks={} cost={} cpc={} cpm={} ctr={}",
            base.impressions(),
            base.clicks(),
            base.cost(),
            fmt_opt(base.cpc()),
            fmt_opt(base.cpm()),
            fmt_opt(base.ctr()),
        )
        .unwrap();
    }
    if !config.deterministic {
        writeln!(report, "timestamp: {}", chrono::Utc::now().to_rfc3339()).unwrap();
    }
    let report_path = config.output_dir.join("comparison_report.txt");
    fs::write(&report_path, &report)?;

    Ok(SimulateOutput {
        trajectory_path,
        report_path,
        recommended_weeks,
        baseline_weeks,
        flat_bid,
    })
}

/// Make cold-start recommendations checkable: with no campaign history all
/// output comes from the network side.
pub fn all_network(recs: &[BidRecommendation]) -> bool {
    recs.iter().all(|r| r.source == RecommendationSource::Network)
}

/// Map of bids keyed by feature, convenience for tests.
pub fn bids_by_key(bids: &[BidRecommendation]) -> HashMap<FeatureCombination, f64> {
    bids.iter().map(|b| (b.key.clone(), b.bid_cpm_usd)).collect()
}
