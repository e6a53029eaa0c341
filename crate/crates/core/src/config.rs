//! Run configuration: flat `key = value` text with `[section]` headers,
//! overridable by CLI flags. Every run records a hash of its effective
//! settings so outputs can be traced back to parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::aggregate::{AggregationConfig, FeatureField, OutlierMetric};
use crate::domain::Prior;
use crate::error::PipelineError;
use crate::ingest::{parse_timestamp, FeedSchema, IngestFilter};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub impressions_path: PathBuf,
    pub clicks_path: PathBuf,
    pub output_dir: PathBuf,
    pub campaign_id: String,
    pub schema: FeedSchema,
    pub filter: IngestFilter,
    pub aggregation: AggregationConfig,
    pub target_cpc: f64,
    /// One output file per fraction; A/B-style runs list several.
    pub optimization_fractions: Vec<f64>,
    pub min_bid_cpm: f64,
    pub max_bid_cpm: f64,
    pub network_scale_fraction: f64,
    pub top_impression_budget: u64,
    /// Mandatory for `recommend`; arrives with the request, no default.
    pub requested_scale: Option<u64>,
    pub seed: u64,
    /// Set when --seed was passed explicitly; suppresses the wall-clock
    /// timestamp line in reports so reruns are byte-identical.
    pub deterministic: bool,
    pub threads: usize,
    pub market_path: Option<PathBuf>,
    pub weeks: u32,
    /// Prior used by the simulator when history is empty.
    pub bootstrap_prior: Prior,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            impressions_path: PathBuf::from("impressions.csv"),
            clicks_path: PathBuf::from("clicks.csv"),
            output_dir: PathBuf::from("."),
            campaign_id: String::new(),
            schema: FeedSchema::default(),
            filter: IngestFilter::default(),
            aggregation: AggregationConfig::default(),
            target_cpc: 1.0,
            optimization_fractions: vec![0.9],
            min_bid_cpm: 0.01,
            max_bid_cpm: 20.0,
            network_scale_fraction: 0.30,
            top_impression_budget: 100_000,
            requested_scale: None,
            seed: 0,
            deterministic: false,
            threads: 0,
            market_path: None,
            weeks: 4,
            bootstrap_prior: Prior {
                prior_clicks: 1.0,
                prior_impressions: 1000.0,
                prior_cpm_usd: 2.0,
            },
        }
    }
}

/// Parse `[section]` / `key = value` text into a flat map keyed
/// `section.key`. `#` and `;` start comments.
pub fn parse_ini(text: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        let full = if section.is_empty() {
            key.trim().to_string()
        } else {
            format!("{section}.{}", key.trim())
        };
        map.insert(full, value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_ini_text(text: &str) -> Result<RunConfig, PipelineError> {
        let map = parse_ini(text)?;
        let mut config = RunConfig::default();

        let parse_f64 = |key: &str, v: &str| -> Result<f64, PipelineError> {
            v.parse()
                .map_err(|_| PipelineError::Config(format!("{key}: expected a number, got {v:?}")))
        };
        let parse_u64 = |key: &str, v: &str| -> Result<u64, PipelineError> {
            v.parse()
                .map_err(|_| PipelineError::Config(format!("{key}: expected an integer, got {v:?}")))
        };

        for (key, value) in &map {
            match key.as_str() {
                "paths.impressions" => config.impressions_path = value.into(),
                "paths.clicks" => config.clicks_path = value.into(),
                "paths.output_dir" => config.output_dir = value.into(),
                "run.campaign_id" => config.campaign_id = value.clone(),
                "run.threads" => config.threads = parse_u64(key, value)? as usize,
                "ingest.geo_allowlist" => {
                    config.filter.geo_allowlist = split_list(value);
                }
                "ingest.window_start" => {
                    config.filter.window_start = Some(parse_timestamp(value).ok_or_else(|| {
                        PipelineError::Config(format!("{key}: bad timestamp {value:?}"))
                    })?)
                }
                "ingest.window_end" => {
                    config.filter.window_end = Some(parse_timestamp(value).ok_or_else(|| {
                        PipelineError::Config(format!("{key}: bad timestamp {value:?}"))
                    })?)
                }
                "aggregate.outlier_sigma" => {
                    config.aggregation.outlier_sigma = parse_f64(key, value)?
                }
                "aggregate.outlier_metric" => {
                    config.aggregation.outlier_metric = match value.as_str() {
                        "impressions" => OutlierMetric::Impressions,
                        "ctr" => OutlierMetric::Ctr,
                        other => {
                            return Err(PipelineError::Config(format!(
                                "{key}: expected impressions or ctr, got {other:?}"
                            )))
                        }
                    }
                }
                "aggregate.grouping_fields" => {
                    config.aggregation.grouping_fields = split_list(value)
                        .iter()
                        .map(|f| FeatureField::parse(f))
                        .collect::<Result<_, _>>()?;
                }
                "bidder.target_cpc" => config.target_cpc = parse_f64(key, value)?,
                "bidder.optimization_fraction" => {
                    config.optimization_fractions = split_list(value)
                        .iter()
                        .map(|v| parse_f64(key, v))
                        .collect::<Result<_, _>>()?;
                }
                "bidder.min_bid_cpm" => config.min_bid_cpm = parse_f64(key, value)?,
                "bidder.max_bid_cpm" => config.max_bid_cpm = parse_f64(key, value)?,
                "merge.network_scale_fraction" => {
                    config.network_scale_fraction = parse_f64(key, value)?
                }
                "merge.top_impression_budget" => {
                    config.top_impression_budget = parse_u64(key, value)?
                }
                "merge.requested_scale" => config.requested_scale = Some(parse_u64(key, value)?),
                "simulate.seed" => config.seed = parse_u64(key, value)?,
                "simulate.market" => config.market_path = Some(value.into()),
                "simulate.weeks" => config.weeks = parse_u64(key, value)? as u32,
                "simulate.prior_clicks" => config.bootstrap_prior.prior_clicks = parse_f64(key, value)?,
                "simulate.prior_impressions" => {
                    config.bootstrap_prior.prior_impressions = parse_f64(key, value)?
                }
                "simulate.prior_cpm" => config.bootstrap_prior.prior_cpm_usd = parse_f64(key, value)?,
                other if other.starts_with("schema.") => {
                    config.schema.rename(&other["schema.".len()..], value)?;
                }
                other => {
                    return Err(PipelineError::Config(format!("unknown config key {other:?}")))
                }
            }
        }
        Ok(config)
    }

    pub fn from_ini_file(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::from_ini_text(&text)
    }

    /// Structural checks plus existence of referenced input paths.
    pub fn validate(&self, check_paths: bool) -> Result<(), PipelineError> {
        if self.campaign_id.is_empty() {
            return Err(PipelineError::Config("campaign_id is required".into()));
        }
        self.aggregation.validate()?;
        crate::bidder::BidPolicy::new(
            self.target_cpc,
            *self
                .optimization_fractions
                .first()
                .ok_or_else(|| PipelineError::Config("at least one optimization_fraction".into()))?,
            self.min_bid_cpm,
            self.max_bid_cpm,
        )?;
        for f in &self.optimization_fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(PipelineError::Config(format!(
                    "optimization_fraction must be in (0, 1], got {f}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.network_scale_fraction) {
            return Err(PipelineError::Config(format!(
                "network_scale_fraction must be in [0,1], got {}",
                self.network_scale_fraction
            )));
        }
        if check_paths {
            for path in [&self.impressions_path, &self.clicks_path] {
                if !path.exists() {
                    return Err(PipelineError::Config(format!(
                        "input path does not exist: {}",
                        path.display()
                    )));
                }
            }
            if let Some(market) = &self.market_path {
                if !market.exists() {
                    return Err(PipelineError::Config(format!(
                        "market path does not exist: {}",
                        market.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hash of the effective settings, recorded in run reports.
    pub fn config_hash(&self) -> String {
        let mut canon = String::new();
        let _ = write!(
            canon,
            "campaign={};target_cpc={};fractions={:?};min={};max={};net_frac={};budget={};scale={:?};sigma={};metric={:?};fields={:?};geo={:?};window={:?}/{:?};seed={};weeks={};prior={}/{}/{}",
            self.campaign_id,
            self.target_cpc,
            self.optimization_fractions,
            self.min_bid_cpm,
            self.max_bid_cpm,
            self.network_scale_fraction,
            self.top_impression_budget,
            self.requested_scale,
            self.aggregation.outlier_sigma,
            self.aggregation.outlier_metric,
            self.aggregation.grouping_fields,
            self.filter.geo_allowlist,
            self.filter.window_start,
            self.filter.window_end,
            self.seed,
            self.weeks,
            self.bootstrap_prior.prior_clicks,
            self.bootstrap_prior.prior_impressions,
            self.bootstrap_prior.prior_cpm_usd,
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}
