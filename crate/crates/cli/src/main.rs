use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disc_cli::commands;
use disc_cli::config::{self, RunConfig};
use disc_core::Result;
use serde_json::json;

#[derive(Parser)]
#[command(name = "disc", version, about = "Counterfactual explanations by deep model inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier bundle (plain, dep or duq per `classifier.mode`).
    TrainClassifier(Common),
    /// Generate counterfactuals for the configured queries.
    Generate(Common),
    /// Score an existing generation directory.
    Evaluate(Common),
    /// Generate counterfactuals and score their classifier discrepancy.
    Discrepancy(Common),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.output_dir {
            cfg.output.dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::TrainClassifier(c) => commands::train_classifier(&c.load()?),
        Command::Generate(c) => commands::generate(&c.load()?, c.workers),
        Command::Evaluate(c) => commands::evaluate(&c.load()?),
        Command::Discrepancy(c) => commands::discrepancy(&c.load()?, c.workers),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            commands::emit(&v);
            ExitCode::SUCCESS
        }
        Err(e) => {
            commands::emit(&json!({"event": "error", "code": e.exit_code(), "message": e.to_string()}));
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
