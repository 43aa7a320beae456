//! `hqa`: train hierarchical quantized autoencoders and use them as a codec.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hqa_core::DecodeMode;

#[derive(Parser)]
#[command(
    name = "hqa",
    version,
    about = "Hierarchical quantized autoencoder toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Stochastic,
    Argmax,
}

impl From<Mode> for DecodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Stochastic => DecodeMode::Stochastic,
            Mode::Argmax => DecodeMode::Argmax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToyMode {
    /// Four panels: target, 4-code, 2-code and the sampling hierarchy.
    Stochastic,
    /// Adds the argmax-decoded hierarchy as a fifth panel.
    Deterministic,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the 1-D four-mode toy problem and write histograms plus coverage reports.
    Toy {
        #[arg(long, default_value = "toy_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ToyMode::Stochastic)]
        mode: ToyMode,
        /// Exit nonzero unless every reported system shows its expected regime.
        #[arg(long = "assert")]
        assert_regimes: bool,
        /// Training steps per model (default from the toy config).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedily train every layer of a config, writing checkpoints and loss logs.
    Train {
        /// TOML experiment config.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Shipped config: mnist-full or mnist-desk.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from checkpoints 1..=k in the output directory, as `layer=k`.
        #[arg(long, value_parser = commands::parse_resume)]
        resume: Option<usize>,
        /// Also save the layer in training every N steps.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Stop after N steps in this invocation, leaving a resumable checkpoint.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Override the config's data directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Encode one image at a layer and write the transmitted indices as a .hqa blob.
    Compress {
        /// Model directory (or its stack.toml).
        #[arg(long)]
        model: PathBuf,
        /// 8-bit PGM/PPM matching the model's input size.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How the transmitted code is chosen from the posterior.
        #[arg(long, value_enum, default_value_t = Mode::Argmax)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct image(s) from a .hqa blob.
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        blob: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Stochastic)]
        mode: Mode,
        /// Independent decodes; decode i uses seed + i and goes to `<stem>_<i>.<ext>`.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode linear interpolations between two images' latents.
    Interp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Intermediate frames; both endpoints are written as well.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Mode::Stochastic)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode every code of a 1×1 layer into one tiled image.
    Enumerate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = Mode::Argmax)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate, distortion, perplexity and probe error per layer on MNIST.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// `all` or a comma-separated list such as `1,3`.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Test images to evaluate.
        #[arg(long, default_value_t = 10_000)]
        limit: usize,
        /// Training images for the probe classifier.
        #[arg(long, default_value_t = 10_000)]
        probe_train: usize,
        #[arg(long)]
        probe_steps: Option<usize>,
        /// Skip the probe classifier and its error column.
        #[arg(long)]
        no_probe: bool,
        #[arg(long, value_enum, default_value_t = Mode::Stochastic)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the machine-readable table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Print a shipped config preset.
    Preset { name: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Toy {
            out,
            seed,
            mode,
            assert_regimes,
            steps,
        } => commands::toy(&out, seed, mode, assert_regimes, steps),
        Command::Train {
            config,
            preset,
            out,
            resume,
            checkpoint_every,
            max_steps,
            data_dir,
        } => commands::train(commands::TrainArgs {
            config,
            preset,
            out,
            resume,
            checkpoint_every,
            max_steps,
            data_dir,
        }),
        Command::Compress {
            model,
            image,
            layer,
            seed,
            mode,
            out,
        } => commands::compress(&model, &image, layer, seed, mode.into(), &out),
        Command::Decompress {
            model,
            blob,
            seed,
            mode,
            samples,
            out,
        } => commands::decompress(&model, &blob, seed, mode.into(), samples, &out),
        Command::Interp {
            model,
            from,
            to,
            layer,
            steps,
            mode,
            seed,
            out,
        } => commands::interp(&model, &from, &to, layer, steps, mode.into(), seed, &out),
        Command::Enumerate {
            model,
            layer,
            mode,
            seed,
            out,
        } => commands::enumerate(&model, layer, mode.into(), seed, &out),
        Command::Eval {
            model,
            layers,
            data_dir,
            limit,
            probe_train,
            probe_steps,
            no_probe,
            mode,
            seed,
            table,
        } => commands::eval(commands::EvalArgs {
            model,
            layers,
            data_dir,
            limit,
            probe_train,
            probe_steps,
            no_probe,
            mode: mode.into(),
            seed,
            table,
        }),
        Command::Preset { name } => commands::preset(&name),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
