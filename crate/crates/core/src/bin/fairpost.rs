//! Command-line front end: `stats`, `equalize`, and `verify` over scored CSV
//! data. See the library documentation for the underlying constructions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairpost::cli::{
    cmd_equalize, cmd_stats, cmd_verify, CliError, CommonConfig, DeferStrategy, EqualizeMode,
    VerifyConfig,
};
use fairpost::ingest::Bucketing;
use fairpost::score::ScoreGrid;

#[derive(Parser)]
#[command(
    name = "fairpost",
    about = "Post-process groupwise-calibrated scores into hard classifiers with equalized group statistics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-group score distributions, distances, and baseline statistics.
    Stats(DataArgs),
    /// Equalize chosen statistics across groups.
    Equalize(EqualizeArgs),
    /// Run the brute-force verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV file (UTF-8, header row required).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "score")]
    score_col: String,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value = "group")]
    group_col: String,
    /// Comma-separated group filter; keeps every group when omitted.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<String>>,
    /// identity: scores are already probabilities; decile: integer ranks 1-10.
    #[arg(long, default_value = "identity")]
    bucket: String,
    #[arg(long, default_value_t = 1)]
    min_bucket_count: usize,
    /// Equalization tolerance for empirical data.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the report and plot-ready artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit timestamps and wall-clock so reports are byte-reproducible.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct EqualizeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// ppv | npv | ppv-npv-defer | ap-defer | mass-average
    #[arg(long)]
    mode: String,
    /// Target value; ppv-npv-defer takes a pair: --target <ppv>,<npv>.
    #[arg(long)]
    target: Option<String>,
    /// For ap-defer: match:<group> or min.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated claim ids; all claims when omitted.
    #[arg(long, value_delimiter = ',')]
    claims: Option<Vec<String>>,
    /// Randomization grid resolution for exhaustive sweeps.
    #[arg(long, default_value_t = 1e-3)]
    r_grid: f64,
    /// Deferral grid resolution for minimality sweeps.
    #[arg(long, default_value_t = 0.05)]
    q_grid: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_timestamp: bool,
}

fn grid_from_env() -> Result<ScoreGrid, CliError> {
    match std::env::var("FAIRPOST_GRID") {
        Err(_) => Ok(ScoreGrid::default()),
        Ok(text) => {
            let resolution: f64 = text
                .parse()
                .map_err(|_| CliError::Input(format!("FAIRPOST_GRID={text:?} is not a number")))?;
            ScoreGrid::new(resolution)
                .map_err(|e| CliError::Input(format!("FAIRPOST_GRID invalid: {e}")))
        }
    }
}

fn common_config(args: &DataArgs) -> Result<CommonConfig, CliError> {
    let bucket = match args.bucket.as_str() {
        "identity" => Bucketing::Identity,
        "decile" => Bucketing::Decile,
        other => {
            return Err(CliError::Input(format!(
                "unknown bucketing {other:?}; use identity or decile"
            )))
        }
    };
    let mut config = CommonConfig::new(&args.input);
    config.score_col = args.score_col.clone();
    config.label_col = args.label_col.clone();
    config.group_col = args.group_col.clone();
    config.groups = args.groups.clone();
    config.bucket = bucket;
    config.min_bucket_count = args.min_bucket_count;
    config.tolerance = args.tolerance;
    config.seed = args.seed;
    config.out = args.out.clone();
    config.no_timestamp = args.no_timestamp;
    config.grid = grid_from_env()?;
    Ok(config)
}

fn parse_mode(args: &EqualizeArgs) -> Result<EqualizeMode, CliError> {
    let single_target = || -> Result<Option<f64>, CliError> {
        args.target
            .as_ref()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| CliError::Input(format!("target {t:?} is not a number")))
            })
            .transpose()
    };
    match args.mode.as_str() {
        "ppv" => Ok(EqualizeMode::Ppv {
            target: single_target()?,
        }),
        "npv" => Ok(EqualizeMode::Npv {
            target: single_target()?,
        }),
        "ppv-npv-defer" => {
            let (ppv, npv) = match &args.target {
                None => (None, None),
                Some(text) => {
                    let parts: Vec<&str> = text.split(',').collect();
                    if parts.len() != 2 {
                        return Err(CliError::Input(
                            "ppv-npv-defer takes --target <ppv>,<npv>".to_owned(),
                        ));
                    }
                    let parse = |t: &str| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| CliError::Input(format!("target {t:?} is not a number")))
                    };
                    (Some(parse(parts[0])?), Some(parse(parts[1])?))
                }
            };
            Ok(EqualizeMode::PpvNpvDefer { ppv, npv })
        }
        "ap-defer" => {
            let strategy = match args.strategy.as_deref() {
                Some("min") => DeferStrategy::Min,
                Some(text) if text.starts_with("match:") => {
                    DeferStrategy::Match(text["match:".len()..].to_owned())
                }
                other => {
                    return Err(CliError::Input(format!(
                        "ap-defer needs --strategy match:<group> or min, got {other:?}"
                    )))
                }
            };
            Ok(EqualizeMode::ApDefer { strategy })
        }
        "mass-average" => Ok(EqualizeMode::MassAverage),
        other => Err(CliError::Input(format!(
            "unknown mode {other:?}; use ppv, npv, ppv-npv-defer, ap-defer, or mass-average"
        ))),
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let report = match &cli.command {
        Command::Stats(args) => cmd_stats(&common_config(args)?)?,
        Command::Equalize(args) => {
            let config = common_config(&args.data)?;
            let mode = parse_mode(args)?;
            cmd_equalize(&config, &mode)?
        }
        Command::Verify(args) => cmd_verify(&VerifyConfig {
            claims: args.claims.clone(),
            r_resolution: args.r_grid,
            q_resolution: args.q_grid,
            seed: args.seed,
            out: args.out.clone(),
            no_timestamp: args.no_timestamp,
        })?,
    };
    println!("{}", report.to_json_string());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
