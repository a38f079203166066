use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "meer", version, about = "Masked face recognition and unmasked face restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic aligned-face dataset with manifest and verification pairs.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        identities: usize,
        #[arg(long, default_value_t = 8)]
        per_identity: usize,
        #[arg(long, default_value_t = 0.25)]
        masked_ratio: f64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Upper bound on positive (and negative) pairs.
        #[arg(long, default_value_t = 300)]
        pairs_per_class: usize,
        /// Fraction of a grid cell that must be covered for it to count as masked.
        #[arg(long, default_value_t = 0.25)]
        occupancy_threshold: f64,
    },
    /// Train stage 1 or stage 2.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Checkpoint of this stage to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verification metrics over a pairs file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Directory the pair paths are relative to (default: the pairs file's directory).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        far: f64,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore the unmasked face of a masked image with a stage-2 checkpoint.
    Removemask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Histogram of per-identity masked/unmasked similarity as CSV.
    PlotData {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Print the mask-pattern vocabulary.
    DumpPatterns {
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData {
            out,
            identities,
            per_identity,
            masked_ratio,
            size,
            seed,
            pairs_per_class,
            occupancy_threshold,
        } => commands::synth_data(
            &out,
            identities,
            per_identity,
            masked_ratio,
            size,
            seed,
            pairs_per_class,
            occupancy_threshold,
        ),
        Command::Train {
            config,
            stage,
            from_checkpoint,
            resume,
            seed,
            out,
        } => commands::train(&config, stage, from_checkpoint.as_deref(), resume.as_deref(), seed, out.as_deref()),
        Command::Eval {
            checkpoint,
            pairs,
            base,
            far,
            folds,
            out,
        } => commands::eval(&checkpoint, &pairs, base.as_deref(), far, folds, out.as_deref()),
        Command::Removemask {
            checkpoint,
            input,
            output,
        } => commands::removemask(&checkpoint, &input, &output),
        Command::PlotData {
            checkpoint,
            manifest,
            out,
            bins,
        } => commands::plot_data(&checkpoint, &manifest, &out, bins),
        Command::DumpPatterns { grid, out } => commands::dump_patterns(grid, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
