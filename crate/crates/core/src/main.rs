use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bidpipe::config::RunConfig;
use bidpipe::pipeline::{run_aggregate, run_recommend, run_simulate};
use bidpipe::PipelineError;

#[derive(Parser)]
#[command(name = "bidpipe", version, about = "CPC-targeting bid recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Flat key = value config file with [section] headers
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, value_name = "ID")]
    campaign_id: Option<String>,

    /// Target cost per click in USD
    #[arg(long, value_name = "USD")]
    target_cpc: Option<f64>,

    /// Repeatable; each fraction produces its own output file
    #[arg(long, value_name = "F")]
    optimization_fraction: Vec<f64>,

    /// Target weekly impressions; required for recommend
    #[arg(long, value_name = "N")]
    requested_scale: Option<u64>,

    /// Share of scale served from network features
    #[arg(long, value_name = "F")]
    network_fraction: Option<f64>,

    /// Cumulative-impression budget for the network top slice
    #[arg(long, value_name = "N")]
    top_impressions: Option<u64>,

    #[arg(long, value_name = "S")]
    outlier_sigma: Option<f64>,

    /// RNG seed; passing it also suppresses timestamps in reports
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads, 0 = auto
    #[arg(long, value_name = "N")]
    threads: Option<usize>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Produce a recommendation file and run report for one campaign
    Recommend(CommonFlags),
    /// Replay weekly pipeline iterations against a synthetic market
    Simulate {
        #[command(flatten)]
        common: CommonFlags,

        /// Market definition CSV
        #[arg(long, value_name = "PATH")]
        market: Option<PathBuf>,

        #[arg(long, value_name = "N")]
        weeks: Option<u32>,
    },
    /// Dump network-level aggregates with adjusted metrics
    Aggregate(CommonFlags),
    /// Parse and validate the config, touching no data
    ValidateConfig(CommonFlags),
}

fn build_config(flags: &CommonFlags) -> Result<RunConfig, PipelineError> {
    let mut config = match &flags.config {
        Some(path) => RunConfig::from_ini_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(id) = &flags.campaign_id {
        config.campaign_id = id.clone();
    }
    if let Some(v) = flags.target_cpc {
        config.target_cpc = v;
    }
    if !flags.optimization_fraction.is_empty() {
        config.optimization_fractions = flags.optimization_fraction.clone();
    }
    if let Some(v) = flags.requested_scale {
        config.requested_scale = Some(v);
    }
    if let Some(v) = flags.network_fraction {
        config.network_scale_fraction = v;
    }
    if let Some(v) = flags.top_impressions {
        config.top_impression_budget = v;
    }
    if let Some(v) = flags.outlier_sigma {
        config.aggregation.outlier_sigma = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
        config.deterministic = true;
    }
    if let Some(v) = flags.threads {
        config.threads = v;
    }
    if let Some(dir) = &flags.out {
        config.output_dir = dir.clone();
    }
    if config.threads > 0 {
        // Ignore failure if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Recommend(flags) => {
            let config = build_config(&flags)?;
            let output = run_recommend(&config)?;
            for path in &output.recommendation_paths {
                println!("wrote {}", path.display());
            }
            println!("wrote {}", output.report_path.display());
            for warning in &output.warnings {
                eprintln!("warning: {warning}");
            }
            Ok(())
        }
        Command::Simulate { common, market, weeks } => {
            let mut config = build_config(&common)?;
            if let Some(path) = market {
                config.market_path = Some(path);
            }
            if let Some(w) = weeks {
                config.weeks = w;
            }
            let output = run_simulate(&config)?;
            println!("wrote {}", output.trajectory_path.display());
            println!("wrote {}", output.report_path.display());
            Ok(())
        }
        Command::Aggregate(flags) => {
            let config = build_config(&flags)?;
            let path = run_aggregate(&config)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ValidateConfig(flags) => {
            let config = build_config(&flags)?;
            config.validate(true)?;
            println!("config ok (hash {})", config.config_hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
