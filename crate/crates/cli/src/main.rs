use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdevl_cli::config::{parse_config, Kind};
use sdevl_cli::run::{run, write_outputs};
use sdevl_cli::suite::{format_line, run_suite, SuiteOptions};

/// Thread count for the Monte Carlo and grid kernels; defaults to all cores.
const THREADS_ENV: &str = "SDEVL_THREADS";

#[derive(Parser)]
#[command(name = "sdevl", version, about = "Extreme value experiments for sampled dissipative SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Survival probability of the sampled chain against e^{-tau}.
    Evl(RunArgs),
    /// Visit-count histogram and chi-square test against Poisson(tau).
    Poisson(RunArgs),
    /// Invariant density, holed and twisted leading eigenvalues.
    Spectrum(RunArgs),
    /// q_k terms and the operator vs Monte Carlo cross-check.
    Kl(RunArgs),
    /// Lasota-Yorke constants for plain and holed operators.
    LyFit(RunArgs),
    /// Survival under finer sampling, against e^{-tau M}.
    Refine(RunArgs),
    /// Survival of block sequences with delta or diffuse noise.
    Blocks(RunArgs),
    /// BV and weighted L1 norms of the test functions.
    Norms(RunArgs),
    /// Runs the whole acceptance suite.
    All(SuiteArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `sampling.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `output` directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for result files of every experiment.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run_one(kind: Kind, args: RunArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    if config.kind != kind {
        eprintln!("config has kind `{}` but the `{}` subcommand was used", config.kind, kind);
        return ExitCode::from(2);
    }
    if let Some(seed) = args.seed {
        config.sampling.seed = seed;
    }
    if let Some(out) = args.out {
        config.output = out;
    }
    let result = match run(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    for c in &result.checks {
        println!(
            "{} {}: value {:.6} target {:.6} tolerance {:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.target,
            c.tolerance
        );
    }
    match write_outputs(&result, &config.output) {
        Ok(files) => println!("wrote {}", files.result.display()),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    }
    if result.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("{e}");
        return ExitCode::from(2);
    }
    let (kind, args) = match cli.command {
        Command::Evl(a) => (Kind::Evl, a),
        Command::Poisson(a) => (Kind::Poisson, a),
        Command::Spectrum(a) => (Kind::Spectrum, a),
        Command::Kl(a) => (Kind::Kl, a),
        Command::LyFit(a) => (Kind::LyFit, a),
        Command::Refine(a) => (Kind::Refine, a),
        Command::Blocks(a) => (Kind::Blocks, a),
        Command::Norms(a) => (Kind::Norms, a),
        Command::All(a) => {
            let opts = SuiteOptions { seed: a.seed, out: a.out };
            let outcomes = run_suite(&opts, |o| println!("{}", format_line(o)));
            let passed = outcomes.iter().filter(|o| o.pass()).count();
            println!("{passed}/{} criteria passed", outcomes.len());
            return if passed == outcomes.len() { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    run_one(kind, args)
}
