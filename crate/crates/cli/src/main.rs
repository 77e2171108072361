//! `amoeg`: generate markets, solve them, and analyse the results.
//!
//! Every command writes its outputs and a `manifest.json` to the output
//! directory (`--out`, or `AMOEG_OUT_DIR`) and prints a short summary.
//! Exit codes: 0 success, 2 usage error, 3 invalid input, 4 solver did
//! not converge (outputs are still written).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "amoeg",
    version,
    about = "Max-Nash-welfare markets under at-most-one preferences"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(
        long,
        global = true,
        env = "AMOEG_OUT_DIR",
        default_value = "amoeg-out"
    )]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a generated market.
    #[command(subcommand)]
    Generate(Generate),
    /// Solve a market.
    Solve(SolveArgs),
    /// Envy, price regret and purity of a solution.
    Analyze(AnalyzeArgs),
    /// Twin-based regret certificate.
    Certify(CertifyArgs),
    /// Paced first-price auction checks.
    Auction(AuctionArgs),
    /// Low-rank deviation campaign.
    Deviate(DeviateArgs),
}

#[derive(Subcommand, Debug)]
pub enum Generate {
    /// Latent-factor market with unit-box factors.
    LowRank {
        #[arg(long)]
        buyers: usize,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        dim: usize,
        /// Total supply, spread evenly over the items.
        #[arg(long)]
        supply_total: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Replicate a base market k times.
    Replicator {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        k: usize,
        /// Zero valuations across replicates instead of copying them.
        #[arg(long)]
        block_diagonal: bool,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Prefix markets of a pool, one per item count and total supply.
    Nested {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        items: Vec<usize>,
        /// Total supplies.
        #[arg(long, value_delimiter = ',', required = true)]
        supply: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Random ranked-list market.
    Ranks {
        #[arg(long)]
        buyers: usize,
        #[arg(long)]
        items: usize,
        /// Items ranked per buyer.
        #[arg(long, default_value_t = 30)]
        ranked: usize,
        #[arg(long, default_value_t = amoeg::market::DEFAULT_MAX_RANK)]
        max_rank: u32,
        /// Supply of every item.
        #[arg(long, default_value_t = 1.0)]
        supply: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum ModeArg {
    Amo,
    Eg,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Solver configuration (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// KKT tolerance override.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub market: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Amo)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long, required_unless_present = "series")]
    pub market: Option<PathBuf>,
    /// Solution JSON; the market is solved when omitted.
    #[arg(long, requires = "market")]
    pub solution: Option<PathBuf>,
    /// Price vector (JSON array) to evaluate regret against.
    #[arg(long, requires = "market")]
    pub against: Option<PathBuf>,
    /// Markets to solve and summarise as one series.
    #[arg(long, num_args = 1.., conflicts_with_all = ["market", "solution", "against"])]
    pub series: Vec<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long)]
    pub market: PathBuf,
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Twin radius.
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    /// Radii for a (eps, delta) curve.
    #[arg(long, value_delimiter = ',')]
    pub eps_sweep: Vec<f64>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Check {
    Monotonicity,
    Maximality,
}

#[derive(Args, Debug)]
pub struct AuctionArgs {
    /// Property check to run instead of a single evaluation.
    #[arg(long, value_enum)]
    pub check: Option<Check>,
    #[arg(long)]
    pub market: Option<PathBuf>,
    /// Pacing multipliers (JSON array).
    #[arg(long)]
    pub beta: Option<PathBuf>,
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub buyers: usize,
    #[arg(long, default_value_t = 4)]
    pub items: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative inflation for the maximality check.
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct DeviateArgs {
    #[arg(long)]
    pub market: PathBuf,
    /// Target buyers sampled.
    #[arg(long, default_value_t = 49)]
    pub buyers: usize,
    #[arg(long, default_value_t = amoeg::deviation::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub evals: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "amo-eg")]
    pub mechanism: amoeg::deviation::Mechanism,
    #[command(flatten)]
    pub solver: SolverArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
