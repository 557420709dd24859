use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mffcn::FusionStrategy;

mod commands;
mod trace;

/// Audio-visual speech enhancement with a multi-layer feature fusion network.
#[derive(Debug, Parser)]
#[command(name = "mffcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every differentiable op and the end-to-end graph against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the encoder shape trace of both branches and compare it with the expected table.
    TraceShapes,
    /// Train a network and write its checkpoint and loss history.
    ///
    /// Flags override the --config file, which overrides the defaults: lr 0.0002, batch 8,
    /// 100 steps, seed 0, SNR -10 to 10 dB, multilayer, width divisor 1 (or the architecture
    /// of --checkpoint), 64 synthetic items.
    Train(TrainArgs),
    /// Enhance a noisy recording with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on held-out synthetic mixtures at 0 and -5 dB.
    Eval(EvalArgs),
    /// Train and score all five fusion strategies under identical settings.
    ///
    /// Flags override the --config file, which overrides the defaults: width divisor 8,
    /// 50 steps, batch 4, 8 synthetic items, lr 0.0002, SNR -10 to 10 dB, seed 0.
    /// --strategy is ignored.
    Ablate(AblateArgs),
    /// Convert between MTEN tensors and PGM images or CSV tables.
    ExportSpec(ExportArgs),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First of the five consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channel divisor of the network checked end to end.
    #[arg(long, default_value_t = 16)]
    width_divisor: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = mffcn::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Fusion strategy of the end-to-end check: early, late, mid-bottleneck, mid-decoder or multilayer.
    #[arg(long, default_value_t = FusionStrategy::MultiLayer)]
    strategy: FusionStrategy,
}

/// Training settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
struct TrainFlags {
    /// Flat `key = value` config file (keys: lr, batch, steps, seed, snr_low, snr_high, strategy, width_divisor, items, noise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of initialization, data synthesis and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Divide every channel count by this.
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Fusion strategy: early, late, mid-bottleneck, mid-decoder or multilayer.
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Segments per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Lowest mixing SNR of synthetic data in dB.
    #[arg(long, allow_hyphen_values = true)]
    snr_low: Option<f64>,
    /// Highest mixing SNR of synthetic data in dB.
    #[arg(long, allow_hyphen_values = true)]
    snr_high: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Directory with noisy.mten [N,80,20], video.mten [N,5,80,80] and clean.mten [N,80,20]; synthetic data when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to start from instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for checkpoint.mffc, loss.csv and config.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with noisy.wav, mouth frames (frames/ of frame_%06d.pgm, or video.mten [T,H,W]) and optionally clean.wav.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for Mel tensors, PGM images and the proxy waveform.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Seed of the held-out mixtures.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for eval.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory for ablation.csv and ablation.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Input file: .mten (to PGM and CSV), .pgm or .csv (to MTEN).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("MFFCN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        mffcn::Error::InvalidArgument { op: "MFFCN_THREADS", msg: format!("expected a positive integer, got `{v}`") }
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::TraceShapes => trace::trace_shapes(),
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ExportSpec(a) => commands::export_spec(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_BAD_INPUT } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
