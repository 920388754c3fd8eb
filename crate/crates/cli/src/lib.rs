//! Command-line front end for the error-calculus library.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{IbpConfig, LevelVolConfig, PerturbConfig, PriceConfig, SensConfig, TriangleConfig};
use report::{Format, Metadata, Report};

pub const DEFAULT_SEED: u64 = 0;
pub const THREADS_VAR: &str = "ERRCALC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] errcalc::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for bad input or budget, 3 for unsupported requests, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                errcalc::Error::Input(_) | errcalc::Error::Budget { .. } => 2,
                errcalc::Error::Capability(_) => 3,
                errcalc::Error::Numeric(_) => 4,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "errcalc", version, about = "Error calculus on Wiener space: prices, sensitivities and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte Carlo paths (outer paths for levelvol, samples for ibp).
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Time steps of the simulation grid.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Perturbation size for perturb-check.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Black-Scholes values and Greeks.
    Price,
    /// Error variances and biases of price, value and hedge.
    Sens,
    /// Nested Monte Carlo errors under level-dependent volatility.
    Levelvol,
    /// Integration-by-parts weights against finite differences.
    Ibp,
    /// Brute-force perturbation checks of the predicted errors.
    PerturbCheck,
    /// Triangle example: closed form against propagation.
    Triangle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Price => "price",
            Command::Sens => "sens",
            Command::Levelvol => "levelvol",
            Command::Ibp => "ibp",
            Command::PerturbCheck => "perturb-check",
            Command::Triangle => "triangle",
        }
    }
}

fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, CliError> {
    let path = path.ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Hex SHA-256 of the command name and the effective configuration.
pub fn config_hash<T: Serialize>(command: &str, cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("configuration serialises");
    let digest = Sha256::new().chain_update(command.as_bytes()).chain_update([0u8]).chain_update(json.as_bytes()).finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn positive(name: &str, v: usize) -> Result<usize, CliError> {
    if v == 0 {
        return Err(CliError::Config(format!("{name} must be positive")));
    }
    Ok(v)
}

/// Runs one invocation and returns the report without writing it.
pub fn execute(cli: &Cli) -> Result<Report, CliError> {
    let path = cli.config.as_deref();
    let name = cli.command.name();
    let (seed, hash, rows) = match cli.command {
        Command::Price => {
            let mut cfg: PriceConfig = load(path)?;
            cfg.seed = cli.seed.or(cfg.seed);
            (cfg.seed, config_hash(name, &cfg), commands::price(&cfg)?)
        }
        Command::Sens => {
            let mut cfg: SensConfig = load(path)?;
            cfg.seed = cli.seed.or(cfg.seed);
            cfg.paths = Some(positive("paths", cli.paths.or(cfg.paths).unwrap_or(1000))?);
            let rows = commands::sens(&cfg, cfg.paths.unwrap_or_default(), cfg.seed.unwrap_or(DEFAULT_SEED))?;
            (cfg.seed, config_hash(name, &cfg), rows)
        }
        Command::Levelvol => {
            let mut cfg: LevelVolConfig = load(path)?;
            cfg.seed = cli.seed.or(cfg.seed);
            cfg.paths = Some(positive("paths", cli.paths.or(cfg.paths).unwrap_or(1000))?);
            cfg.steps = Some(positive("steps", cli.steps.or(cfg.steps).unwrap_or(200))?);
            let rows = commands::levelvol(
                &cfg,
                cfg.paths.unwrap_or_default(),
                cfg.steps.unwrap_or_default(),
                cfg.seed.unwrap_or(DEFAULT_SEED),
            )?;
            (cfg.seed, config_hash(name, &cfg), rows)
        }
        Command::Ibp => {
            let mut cfg: IbpConfig = load(path)?;
            cfg.seed = cli.seed.or(cfg.seed);
            cfg.paths = Some(positive("paths", cli.paths.or(cfg.paths).unwrap_or(100_000))?);
            cfg.scheme.n_steps = Some(positive("steps", cli.steps.or(cfg.scheme.n_steps).unwrap_or(1))?);
            let rows = commands::ibp(
                &cfg,
                cfg.paths.unwrap_or_default(),
                cfg.scheme.n_steps.unwrap_or_default(),
                cfg.seed.unwrap_or(DEFAULT_SEED),
            )?;
            (cfg.seed, config_hash(name, &cfg), rows)
        }
        Command::PerturbCheck => {
            let mut cfg: PerturbConfig = load(path)?;
            cfg.seed = cli.seed.or(cfg.seed);
            cfg.paths = Some(positive("paths", cli.paths.or(cfg.paths).unwrap_or(10_000))?);
            let theta = cli.theta.or(cfg.theta).unwrap_or(1e-3);
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(CliError::Config(format!("theta must lie in (0, 1], got {theta}")));
            }
            cfg.theta = Some(theta);
            let rows =
                commands::perturb_check(&cfg, cfg.paths.unwrap_or_default(), theta, cfg.seed.unwrap_or(DEFAULT_SEED))?;
            (cfg.seed, config_hash(name, &cfg), rows)
        }
        Command::Triangle => {
            let cfg: TriangleConfig = load(path)?;
            (cli.seed, config_hash(name, &cfg), commands::triangle(&cfg)?)
        }
    };
    Ok(Report {
        metadata: Metadata {
            command: name.to_owned(),
            seed: seed.unwrap_or(DEFAULT_SEED),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: hash,
        },
        rows,
    })
}

/// Sizes the global rayon pool from `ERRCALC_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Parses nothing; runs a parsed invocation and writes the output.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let text = execute(cli)?.render(cli.format);
    match &cli.out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
        }
    }
}
