use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use styler_cli::{rerun, run_command, CliError, Command, Preset};

/// Thread cap for internal parallelism.
const THREADS_ENV: &str = "STYLER_THREADS";

#[derive(Parser)]
#[command(name = "styler", version, about = "Cross-LoRA style transfer on a toy latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Pin seeds and step counts and use the cached fixture base checkpoint.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Output directory; must be absent or empty.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the base denoiser on the procedural dataset.
    TrainBase(RunArgs),
    /// Fit a LoRA adapter to one style image.
    TrainLora(RunArgs),
    /// Style one content image with one adapter.
    Transfer(RunArgs),
    /// Style mask regions with different adapters.
    TransferMasked(RunArgs),
    /// Switch adapters across denoising steps.
    TransferMultistyle(RunArgs),
    /// Compare decoder features of two models and draw PCA grids.
    AnalyzeFeatures(RunArgs),
    /// Re-execute a run from its manifest and verify the output hashes.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    let (command, args) = match cmd {
        Cmd::TrainBase(a) => (Command::TrainBase, a),
        Cmd::TrainLora(a) => (Command::TrainLora, a),
        Cmd::Transfer(a) => (Command::Transfer, a),
        Cmd::TransferMasked(a) => (Command::TransferMasked, a),
        Cmd::TransferMultistyle(a) => (Command::TransferMultistyle, a),
        Cmd::AnalyzeFeatures(a) => (Command::AnalyzeFeatures, a),
        Cmd::Rerun { manifest, out } => {
            rerun(&manifest, &out)?;
            println!("{}", out.display());
            return Ok(());
        }
    };
    run_command(command, &args.config, args.preset, &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("{}", CliError::config(format!("{e:#}")).to_json());
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
