mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covfilt::experiment::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "covfilt", version, about = "Learned measurement covariances for Kalman filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; artifacts go to data/, models/, eval/ and rainbow/.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate training, test and shifted test tracks.
    Generate,
    /// Train the configured covariance methods.
    Train,
    /// Filter the test sets with every method and tabulate errors.
    Evaluate,
    /// Fit the 2-D heteroscedastic demo and write predicted ellipses.
    DemoRainbow,
}

/// Failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct Failure {
    kind: String,
    message: String,
}

impl Failure {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self { kind: kind.to_string(), message: message.into() }
    }
}

impl From<covfilt::Error> for Failure {
    fn from(e: covfilt::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}

fn init_logging() -> Result<(), Failure> {
    let level = match std::env::var("COVFILT_LOG") {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => "error".to_string(),
        Err(e) => return Err(Failure::new("usage", format!("COVFILT_LOG: {e}"))),
    };
    if !matches!(level.as_str(), "error" | "info" | "debug") {
        return Err(Failure::new("usage", format!("COVFILT_LOG must be error, info or debug, got `{level}`")));
    }
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new("config", format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| Failure::new(e.kind(), format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_logging()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new("usage", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new("usage", e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    let layout = artifacts::Layout::new(&cli.out, &cfg);
    match cli.command {
        Command::Generate => commands::generate(&cfg, &layout),
        Command::Train => commands::train(&cfg, &layout),
        Command::Evaluate => commands::evaluate(&cfg, &layout),
        Command::DemoRainbow => commands::demo_rainbow(&cfg, &layout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report(&Failure::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::FAILURE
        }
    }
}

fn report(f: &Failure) {
    let line = serde_json::json!({ "error": f.kind, "message": f.message.replace('\n', " ") });
    eprintln!("{line}");
}
