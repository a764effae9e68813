//! `clusterlearn` command line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clusterlearn::app::{cmd_analyze, cmd_calibrate, cmd_diagnose, cmd_simulate, RunConfig};
use clusterlearn::Error;

#[derive(Parser)]
#[command(
    name = "clusterlearn",
    version,
    about = "Cluster-based inference for spatially dependent data with learned partitions"
)]
struct Cli {
    /// JSON config file mirroring all flags; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread budget (default: logical cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonFlags {
    /// Panel dataset CSV (unit_id,period,y,x,w1..wp[,z][,lat,lon])
    #[arg(long)]
    data: Option<PathBuf>,

    /// Locations CSV (unit_id,period,lat,lon) when the dataset has no
    /// coordinate columns
    #[arg(long)]
    locations: Option<PathBuf>,

    /// Output directory (default: current directory)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Nominal level (default 0.05)
    #[arg(long)]
    alpha: Option<f64>,

    /// Candidate cluster-count ceiling (default: ceil(n^(1/3)))
    #[arg(long = "kmax")]
    k_max: Option<usize>,

    /// Inner simulation replications
    #[arg(long = "B")]
    b: Option<usize>,

    /// Root seed (mandatory for stochastic commands)
    #[arg(long)]
    seed: Option<u64>,

    /// Method set: im, crs, cce, unit, or all
    #[arg(long)]
    method: Option<String>,

    /// Seed for the exact-level randomized CRS tie rule (default:
    /// conservative non-randomized rule)
    #[arg(long = "randomized-crs")]
    randomized_crs: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full analysis pipeline on a dataset
    Analyze(CommonFlags),
    /// Calibrate the level and cluster count, emitting the error grid
    Calibrate(CommonFlags),
    /// Run a Monte Carlo study of the procedure
    Simulate {
        #[command(flatten)]
        common: CommonFlags,

        /// Design: {ols,iv}-{baseline,sar}
        #[arg(long)]
        design: Option<String>,

        /// Number of spatial units (default 205)
        #[arg(long)]
        units: Option<usize>,

        /// Outer replications
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Dissimilarity and partition-regularity diagnostics
    Diagnose {
        #[command(flatten)]
        common: CommonFlags,

        /// Run the O(n^3) triangle-inequality check
        #[arg(long)]
        check_triangle: bool,
    },
}

fn flags_to_config(common: &CommonFlags, cli: &Cli) -> RunConfig {
    RunConfig {
        data: common.data.clone(),
        locations: common.locations.clone(),
        out: common.out.clone(),
        alpha: common.alpha,
        k_max: common.k_max,
        b: common.b,
        seed: common.seed,
        method: common.method.clone(),
        randomized_crs: common.randomized_crs,
        threads: cli.threads,
        ..Default::default()
    }
}

fn build_config(cli: &Cli, flags: RunConfig) -> Result<RunConfig, Error> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    Ok(base.merged_with(&flags))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = match &cli.command {
        Command::Analyze(common) | Command::Calibrate(common) => {
            build_config(cli, flags_to_config(common, cli))?
        }
        Command::Simulate {
            common,
            design,
            units,
            reps,
        } => {
            let mut flags = flags_to_config(common, cli);
            flags.design = design.clone();
            flags.units = *units;
            flags.reps = *reps;
            build_config(cli, flags)?
        }
        Command::Diagnose {
            common,
            check_triangle,
        } => {
            let mut flags = flags_to_config(common, cli);
            if *check_triangle {
                flags.check_triangle = Some(true);
            }
            build_config(cli, flags)?
        }
    };

    if let Some(threads) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::Analyze(_) => cmd_analyze(&config),
        Command::Calibrate(_) => cmd_calibrate(&config),
        Command::Simulate { .. } => cmd_simulate(&config).map(|report| {
            for m in &report.methods {
                log::info!(
                    "{}: size {:.4}, {} replications, {} failures",
                    m.method,
                    m.size,
                    report.reps_completed,
                    m.failures
                );
            }
        }),
        Command::Diagnose { .. } => cmd_diagnose(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
