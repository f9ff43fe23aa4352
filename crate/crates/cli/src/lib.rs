//! Experiment driver: flags or a config file in, CSV series and JSON summaries out.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;
pub mod stats;

use std::ffi::OsString;
use std::io::Write;

use args::{Cli, Command};
use output::{RunManifest, Sink};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Clap(#[from] clap::Error),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] heatlab::Error),
    #[error("ensemble failed: {0}")]
    Ensemble(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    /// 0 for help/version, 2 for usage and gate errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use clap::error::ErrorKind;
        match self {
            CliError::Clap(e) => match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            },
            CliError::Usage(_) => 2,
            CliError::Core(heatlab::Error::Gate(_) | heatlab::Error::Parse(_)) => 2,
            CliError::Core(heatlab::Error::Numerical(_)) | CliError::Ensemble(_) => 3,
            CliError::Core(heatlab::Error::Io(_)) | CliError::Io(_) => 1,
        }
    }
}

/// Parse and re-run every parameter gate that is cheap to check.
pub fn load<I, T>(argv: I) -> Result<Cli, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = config::parse_args(argv)?;
    if let Some(cmd) = &cli.command {
        commands::validate(cmd)?;
    }
    Ok(cli)
}

pub fn execute(cli: &Cli) -> Result<RunManifest, CliError> {
    let cmd = cli.command.as_ref().ok_or_else(|| CliError::Usage("no subcommand".into()))?;
    let hash = config::config_hash(cli);
    let mut sink = Sink::new(&cli.global.out_dir, hash.clone())?;
    if let Command::Report(_) = cmd {
        let summary = commands::report(&mut sink)?;
        return Ok(RunManifest {
            command: "report".into(),
            config_hash: hash,
            version: env!("CARGO_PKG_VERSION"),
            seeds: vec![],
            runs: vec![],
            outputs: sink.written,
            summary: Some(summary),
        });
    }
    sink.text("config.toml", &config::to_toml(&config::config_table(cli)))?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| commands::dispatch(cmd, cli.global.seed, &mut sink))?;

    let mut seeds: Vec<u64> = outcome.runs.iter().map(|r| r.seed).collect();
    seeds.dedup();
    sink.written.push("manifest.json".into());
    let manifest = RunManifest {
        command: cmd.name().into(),
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION"),
        seeds,
        runs: outcome.runs,
        outputs: sink.written.clone(),
        summary: outcome.summary,
    };
    sink.json("manifest.json", &manifest)?;
    match outcome.failure {
        Some(msg) => Err(CliError::Ensemble(msg)),
        None => Ok(manifest),
    }
}

/// Whole program: returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = load(argv).and_then(|cli| {
        eprint!("{}", config::to_toml(&config::config_table(&cli)));
        execute(&cli)
    });
    match result {
        Ok(manifest) => {
            if let Some(s) = &manifest.summary {
                // a closed pipe on stdout is not an error worth a panic
                let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(s).unwrap_or_default());
            }
            0
        }
        Err(e @ CliError::Clap(_)) => {
            if let CliError::Clap(inner) = &e {
                let _ = inner.print();
            }
            e.exit_code()
        }
        Err(e) => {
            eprintln!("heatlab: {e}");
            e.exit_code()
        }
    }
}
