use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use misa::experiments::{self, ExperimentConfig, Manifest};
use misa::Error;

const DEFAULT_OUT_DIR: &str = "results";

/// Runs experiment configs and checks their outputs.
///
/// Exit codes: 0 success, 1 config or usage error, 2 property violation,
/// 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "misa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Replace the master seed of the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Output directory [default: results].
    #[arg(long, global = true, env = "MISA_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a config and write `<output>.csv` plus its manifest.
    Run { config: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// Re-run the config recorded in a manifest and compare the CSV hash.
    /// The regenerated CSV is written only when an output directory is set.
    Replay { manifest: PathBuf },
}

enum Failure {
    Usage(String),
    Error(Error),
    Violation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::RankDeficient { .. } | Error::ReducibleChain(_) => 3,
        Error::HypothesisViolated(_) | Error::NotBisimulation(_) => 2,
        _ => 1,
    }
}

fn load(path: &PathBuf, seed_override: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed_override {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.jobs == Some(0) {
        return Err(Failure::Usage("--jobs must be positive".into()));
    }
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config, cli.seed_override)?;
            println!(
                "{}: valid {} config, {} seeds, output {}",
                config.display(),
                cfg.kind().name(),
                cfg.seeds.len(),
                cfg.output_name()
            );
            Ok(())
        }
        Command::Run { config } => {
            let cfg = load(&config, cli.seed_override)?;
            let dir = cli.out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
            let written = experiments::run_and_write(&cfg, &dir, cli.jobs)?;
            println!(
                "wrote {} ({} rows) and {}",
                written.csv.display(),
                written.output.rows.len(),
                written.manifest.display()
            );
            if written.output.violations.is_empty() {
                Ok(())
            } else {
                for v in &written.output.violations {
                    eprintln!("violation: {v}");
                }
                Err(Failure::Violation(format!("{} property violations", written.output.violations.len())))
            }
        }
        Command::Replay { manifest } => {
            if cli.seed_override.is_some() {
                return Err(Failure::Usage("replay uses the recorded seeds; drop --seed-override".into()));
            }
            let m = Manifest::load(&manifest)?;
            let cfg = ExperimentConfig::from_value(m.config.clone())?;
            let (csv, output) = match &cli.out_dir {
                Some(dir) => {
                    let w = experiments::run_and_write(&cfg, dir, cli.jobs)?;
                    (std::fs::read(&w.csv).map_err(Error::from)?, w.output)
                }
                None => {
                    let out = experiments::run(&cfg, cli.jobs)?;
                    (out.to_csv()?, out)
                }
            };
            let hash = experiments::sha256_hex(&csv);
            if m.code_version != experiments::CODE_VERSION {
                eprintln!("note: manifest written by {}, replaying with {}", m.code_version, experiments::CODE_VERSION);
            }
            if hash == m.output.sha256 {
                println!("replay matches {} ({} rows, sha256 {hash})", m.output.path, output.rows.len());
                Ok(())
            } else {
                Err(Failure::Violation(format!(
                    "replay of {} differs: sha256 {hash}, manifest {}",
                    m.output.path, m.output.sha256
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
