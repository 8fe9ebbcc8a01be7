mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "perturbkey", version, about = "Hide key-selectable secret images in a universal perturbation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    None,
    Blur,
    Jpeg,
}

#[derive(Subcommand)]
enum Command {
    /// Write a key image: a solid color or seeded noise.
    #[command(group(ArgGroup::new("source").required(true).args(["color", "noise_seed"])))]
    MakeKey {
        /// Solid color as R,G,B (0-255 each).
        #[arg(long, value_parser = commands::parse_rgb)]
        color: Option<[u8; 3]>,
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Resolution as HxW.
        #[arg(long, default_value = "64x64", value_parser = commands::parse_resolution)]
        resolution: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train the perturbation and the decoder.
    Train {
        /// JSON run configuration; the desk profile is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        covers: PathBuf,
        #[arg(long)]
        secrets: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured iteration count.
        #[arg(long)]
        max_iter: Option<u64>,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
        /// Update δ from the encoder loss only and θ from the decoder losses.
        #[arg(long)]
        literal_alg1: bool,
    },
    /// Add the trained perturbation to a cover image or a folder of covers.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the secret selected by a key from a container.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        container: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a real corruption to an image.
    #[command(group(ArgGroup::new("kind").required(true).args(["blur", "jpeg", "quantize"])))]
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian blur kernel size (odd).
        #[arg(long)]
        blur: Option<usize>,
        /// JPEG quality 1-100.
        #[arg(long)]
        jpeg: Option<u8>,
        #[arg(long)]
        quantize: bool,
    },
    /// Report container and decoding quality over a folder of covers.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        covers: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        sweep: SweepKind,
        /// Output path; `.csv` writes per-row CSV, anything else JSON.
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
