use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qdex_cli::{format_checks, run, Command, ScenarioConfig, EXIT_CHECK_FAILED};

#[derive(Parser)]
#[command(name = "qdex", version, about = "Run qdex simulation experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Scenario file (TOML); a run's manifest.toml also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Evaluate the run's assertions; exit 3 if any fails.
    #[arg(long, global = true)]
    check: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Rate-Adapt vs fixed-rate key delivery.
    RateAdapt,
    /// Handshake latency benchmark.
    QsahBench,
    /// Consensus ensemble against the finality bounds.
    Porlite,
    /// Key pool analytics and simulation.
    Keypool,
    /// Security-coupled market clearing.
    Market,
    /// End-to-end pipeline.
    FullStack,
}

impl From<Verb> for Command {
    fn from(v: Verb) -> Self {
        match v {
            Verb::RateAdapt => Command::RateAdapt,
            Verb::QsahBench => Command::QsahBench,
            Verb::Porlite => Command::Porlite,
            Verb::Keypool => Command::Keypool,
            Verb::Market => Command::Market,
            Verb::FullStack => Command::FullStack,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let loaded = match &cli.config {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default()),
    };
    let mut cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    let out = cfg.out.clone();
    match run(cli.verb.into(), &cfg, &out, cli.jobs) {
        Ok(a) => {
            println!("wrote {} files to {}", a.files.len() + 1, out.display());
            if cli.check {
                print!("{}", format_checks(&a.checks));
                if !a.all_passed() {
                    return ExitCode::from(EXIT_CHECK_FAILED as u8);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
