use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use pill_core::sim::{load_config, run_experiment, write_logs, ExperimentConfig, SimError};

#[derive(Parser)]
#[command(name = "pillsim", version, about = "Federated poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `output.dir` or `runs/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` with a dotted key, e.g. `attack.kind=trim`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every `*.json` config in a directory, in name order.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Data(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn out_dir(config: &ExperimentConfig, path: &Path, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| config.output.dir.clone()).unwrap_or_else(|| {
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        Path::new("runs").join(stem)
    })
}

fn run_one(path: &Path, seed: Option<u64>, out: Option<PathBuf>, overrides: &[String]) -> Result<(), Failure> {
    let mut config = load_config(path, overrides)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let dir = out_dir(&config, path, out);
    let result = run_experiment(&config)?;
    let (csv, json) = write_logs(&dir, &result.logs, &result.summary(&config))?;
    info!("{}: final error {:.4}", path.display(), result.final_error());
    println!("{}\t{}\t{:.6}", csv.display(), json.display(), result.final_error());
    Ok(())
}

fn sweep(dir: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let mut configs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(Failure::Config(format!("no *.json configs in {}", dir.display())));
    }
    for path in &configs {
        let sub = out.as_ref().map(|o| o.join(path.file_stem().unwrap()));
        run_one(path, None, sub, &[])?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            overrides,
        } => run_one(&config, seed, out, &overrides),
        Command::Sweep { configs, out } => sweep(&configs, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            error!("{msg}");
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            error!("{msg}");
            eprintln!("runtime error: {msg}");
            ExitCode::from(3)
        }
    }
}
