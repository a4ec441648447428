mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "msdem", version, about = "Multi-source dynamic expansion model for continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain feature stream and its manifest.
    GenSynth(GenSynthArgs),
    /// Train over a task stream, checkpointing after every task.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every task of a stream.
    Eval(EvalArgs),
    /// Summarise a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct GenSynthArgs {
    /// Stream description (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "print_config")]
    manifest: Option<PathBuf>,
    /// Model and training settings (TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Seed for initialisation, shuffling and routing noise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    print_config: bool,
    /// Stop after this many tasks, as if interrupted.
    #[arg(long, hide = true)]
    stop_after_task: Option<u32>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<msdem::MsdemError>() {
            return match e {
                msdem::MsdemError::Shape { .. } => "shape",
                msdem::MsdemError::NonFinite(_) => "numeric",
                msdem::MsdemError::Invalid(_) => "invalid",
                msdem::MsdemError::Frozen(_) => "frozen",
                msdem::MsdemError::Parse { .. } => "parse",
                msdem::MsdemError::Io { .. } => "io",
                msdem::MsdemError::Config(_) => "config",
            };
        }
        if cause.downcast_ref::<commands::ConfigError>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MSDEM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| commands::ConfigError(format!("MSDEM_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("msdem-error[{}]: {message}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
