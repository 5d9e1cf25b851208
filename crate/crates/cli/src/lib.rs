//! Experiment harness for the qdex simulation stack.
//!
//! Each [`Command`] turns a [`ScenarioConfig`] into a set of output files and
//! a list of [`Check`]s. [`run`] writes the files together with a
//! `manifest.toml` that echoes the resolved configuration, so
//! `--config <dir>/manifest.toml` reproduces the run byte for byte.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::ScenarioConfig;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{module}: {message}")]
    Run {
        module: &'static str,
        message: String,
    },
}

impl CliError {
    pub fn run(module: &'static str, e: impl std::fmt::Display) -> Self {
        Self::Run {
            module,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Exit code when `--check` finds a failing assertion.
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    RateAdapt,
    QsahBench,
    Porlite,
    Keypool,
    Market,
    FullStack,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::RateAdapt,
        Command::QsahBench,
        Command::Porlite,
        Command::Keypool,
        Command::Market,
        Command::FullStack,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::RateAdapt => "rate-adapt",
            Command::QsahBench => "qsah-bench",
            Command::Porlite => "porlite",
            Command::Keypool => "keypool",
            Command::Market => "market",
            Command::FullStack => "full-stack",
        }
    }
}

/// One named assertion evaluated on a run's results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Output files in write order, with the checks of the run.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
}

impl Artifacts {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs `cmd` on a worker pool of `jobs` threads.
pub fn execute(cmd: Command, cfg: &ScenarioConfig, jobs: usize) -> Result<Artifacts, CliError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::run("cli", e))?;
    pool.install(|| match cmd {
        Command::RateAdapt => commands::rate_adapt(cfg),
        Command::QsahBench => commands::qsah_bench(cfg),
        Command::Porlite => commands::porlite(cfg),
        Command::Keypool => commands::keypool(cfg),
        Command::Market => commands::market(cfg),
        Command::FullStack => commands::full_stack(cfg),
    })
}

/// Executes `cmd` and writes its files and manifest under `out`.
pub fn run(
    cmd: Command,
    cfg: &ScenarioConfig,
    out: &Path,
    jobs: usize,
) -> Result<Artifacts, CliError> {
    let artifacts = execute(cmd, cfg, jobs)?;
    std::fs::create_dir_all(out)?;
    for (name, bytes) in &artifacts.files {
        std::fs::write(out.join(name), bytes)?;
    }
    std::fs::write(out.join(MANIFEST), manifest(cmd, cfg, out, &artifacts))?;
    Ok(artifacts)
}

/// Resolved configuration followed by a `[run]` table naming the command and
/// the SHA-256 of every output file.
pub fn manifest(cmd: Command, cfg: &ScenarioConfig, out: &Path, a: &Artifacts) -> String {
    let resolved = ScenarioConfig {
        out: PathBuf::from(out),
        run: None,
        ..cfg.clone()
    };
    let mut text = resolved.to_toml();
    text.push_str("\n[run]\n");
    text.push_str(&format!("command = \"{}\"\n", cmd.name()));
    text.push_str(&format!("version = \"{}\"\n", env!("CARGO_PKG_VERSION")));
    text.push_str("\n[run.outputs]\n");
    for (name, bytes) in &a.files {
        text.push_str(&format!("\"{name}\" = \"{:x}\"\n", Sha256::digest(bytes)));
    }
    text
}

/// One line per check: `PASS name: detail` or `FAIL name: detail`.
pub fn format_checks(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| {
            format!(
                "{} {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )
        })
        .collect()
}
