mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{analysis, data, explain, train};
use crate::error::CliError;

pub const THREADS_ENV: &str = "YIELDXAI_THREADS";

#[derive(Parser)]
#[command(name = "yieldxai", version, about = "Multimodal crop-yield regression and its explanations")]
struct Cli {
    /// TOML document with one table per command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    GenData(data::GenDataFlags),
    /// Train a model and report held-out metrics.
    Train(train::TrainFlags),
    /// Evaluate a checkpoint.
    Eval(train::EvalFlags),
    /// Temporal attributions with AR, GA or SVS.
    Explain(explain::ExplainFlags),
    /// Linear probes from every layer to the prediction.
    Probe(analysis::ProbeFlags),
    /// Modality importance with WMA or SVS.
    Modality(explain::ModalityFlags),
    /// Regression trees over weather attributions per farm-year.
    WeatherTree(analysis::WeatherTreeFlags),
    /// Infidelity and max-sensitivity of the attribution methods.
    Robustness(explain::RobustnessFlags),
    /// Entropy of temporal attention per field, encoder and layer.
    Entropy(analysis::EntropyFlags),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value.trim().parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={value} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(format!("{THREADS_ENV}: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let doc = config::load_document(cli.config.as_deref())?;
    let doc = doc.as_ref();
    match cli.command {
        Command::GenData(f) => data::gen_data(doc, &f, cli.seed),
        Command::Train(f) => train::train(doc, &f, cli.seed),
        Command::Eval(f) => train::eval(doc, &f, cli.seed),
        Command::Explain(f) => explain::explain(doc, &f, cli.seed),
        Command::Probe(f) => analysis::probe(doc, &f, cli.seed),
        Command::Modality(f) => explain::modality(doc, &f, cli.seed),
        Command::WeatherTree(f) => analysis::weather_tree(doc, &f, cli.seed),
        Command::Robustness(f) => explain::robustness(doc, &f, cli.seed),
        Command::Entropy(f) => analysis::entropy(doc, &f, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
