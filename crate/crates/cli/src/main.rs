//! `crossmfg`: command-line front end of the cross-holding mean-field game
//! toolkit.
//!
//! Exit codes: 0 on success, 2 when the run ends in a verdict (no
//! equilibrium, arbitrage, violated proportionality), 1 on any other error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossmfg::oneperiod::Sign;

#[derive(Debug, Parser)]
#[command(name = "crossmfg", version, about = "Equilibria of the mean-field game of equity cross-holding under common noise")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory receiving the run artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Equilibrium sign of the one-period field (defaults to the matched one).
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub sign: Option<Sign>,
    /// Utility of the continuous-time equilibrium (defaults to power when the
    /// scenario sets `p`, log otherwise).
    #[arg(long, global = true, value_enum)]
    pub utility: Option<UtilityArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UtilityArg {
    Log,
    Power,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One-period model.
    #[command(subcommand)]
    OnePeriod(OnePeriodCmd),
    /// Continuous-time Black–Scholes family.
    #[command(subcommand)]
    Ct(CtCmd),
    /// Quadratic BSDE of the power-utility equilibrium.
    #[command(subcommand)]
    Bsde(BsdeCmd),
    /// Collects the CSVs of a run directory into one long-format table.
    EmitPlotData {
        /// Run directory (an `--out-dir` of earlier runs).
        run_dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum OnePeriodCmd {
    /// Solves the field equation and verifies the equilibrium.
    Solve { scenario: PathBuf },
    /// Searches a no-arbitrage certificate or an arbitrage witness.
    NaCheck { scenario: PathBuf },
    /// Finite-population convergence study.
    Nplayer { scenario: PathBuf },
}

#[derive(Debug, Subcommand)]
enum CtCmd {
    /// Simulates a particle ensemble under the configured control.
    Simulate { scenario: PathBuf },
    /// Tests proportionality of drift and common volatility.
    NipCheck { scenario: PathBuf },
    /// Maps the configured control to cross-holding strategies.
    MapControl { scenario: PathBuf },
    /// Constructs and verifies the log- or power-utility equilibrium.
    Equilibrium { scenario: PathBuf },
}

#[derive(Debug, Subcommand)]
enum BsdeCmd {
    /// Solves the quadratic BSDE by backward regression.
    Solve { scenario: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSMFG_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(w) = cli.global.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot configure {w} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let g = &cli.global;
    let result = match &cli.command {
        Command::OnePeriod(OnePeriodCmd::Solve { scenario }) => commands::one_period_solve(g, scenario),
        Command::OnePeriod(OnePeriodCmd::NaCheck { scenario }) => commands::one_period_na_check(g, scenario),
        Command::OnePeriod(OnePeriodCmd::Nplayer { scenario }) => commands::one_period_nplayer(g, scenario),
        Command::Ct(CtCmd::Simulate { scenario }) => commands::ct_simulate(g, scenario),
        Command::Ct(CtCmd::NipCheck { scenario }) => commands::ct_nip_check(g, scenario),
        Command::Ct(CtCmd::MapControl { scenario }) => commands::ct_map_control(g, scenario),
        Command::Ct(CtCmd::Equilibrium { scenario }) => commands::ct_equilibrium(g, scenario),
        Command::Bsde(BsdeCmd::Solve { scenario }) => commands::bsde_solve(g, scenario),
        Command::EmitPlotData { run_dir } => commands::emit_plot_data(g, run_dir),
    };
    match result {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Verdict(v)) => {
            println!("verdict: {v}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
