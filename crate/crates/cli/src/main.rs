mod commands;
mod error;
mod settings;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gfus::corpus::PairingMode;
use gfus::generator::{DecodeConfig, Strategy};
use gfus::model::{FusionMode, GateGranularity};
use gfus::numerics::OpKind;

use crate::error::{CliError, CliResult};
use crate::settings::RunConfig;

#[derive(Parser)]
#[command(name = "gfus", version, about = "Gated-fusion encoder/decoder text generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a raw text corpus, one document per line.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 30_000)]
        max_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints, the log and the loss curve.
    Train {
        /// Flat `section.key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one setting, e.g. `--set train.epochs=5`. Repeatable.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Seed for initialization, shuffling, dropout and the data split.
        #[arg(long)]
        seed: Option<u64>,
        /// Training data; overrides data.train.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode from a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to vocab.txt next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, conflicts_with = "input_file")]
        input: Option<String>,
        /// One source per line.
        #[arg(long)]
        input_file: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score checkpoints on a test set and write report.csv and report.txt.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Row label per checkpoint, in order; defaults to the fusion mode.
        #[arg(long = "name")]
        names: Vec<String>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Read the test file as whole documents split at this fraction.
        #[arg(long)]
        auto_split: Option<f64>,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic paired TSV dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = Task::Reversal)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        len: usize,
        #[arg(long, default_value_t = 30)]
        alphabet: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "both", value_parser = parse_fusion)]
        fusion_mode: FusionMode,
        #[arg(long, default_value = "scalar", value_parser = parse_granularity)]
        gate_granularity: GateGranularity,
        /// Corrupt the backward rule of one primitive.
        #[arg(long, value_enum, hide = true)]
        fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Reversal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Matmul,
    MatmulBt,
    Add,
    AddRow,
    MaskMul,
    Sigmoid,
    Gelu,
    Softmax,
    LayerNorm,
    Gather,
    Lerp,
    Attention,
    CrossEntropy,
    Sum,
}

impl From<Fault> for OpKind {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Matmul => OpKind::MatMul,
            Fault::MatmulBt => OpKind::MatMulBt,
            Fault::Add => OpKind::Add,
            Fault::AddRow => OpKind::AddRow,
            Fault::MaskMul => OpKind::MaskMul,
            Fault::Sigmoid => OpKind::Sigmoid,
            Fault::Gelu => OpKind::Gelu,
            Fault::Softmax => OpKind::Softmax,
            Fault::LayerNorm => OpKind::LayerNorm,
            Fault::Gather => OpKind::Gather,
            Fault::Lerp => OpKind::Lerp,
            Fault::Attention => OpKind::Attention,
            Fault::CrossEntropy => OpKind::CrossEntropy,
            Fault::Sum => OpKind::Sum,
        }
    }
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: gfus::Error| e.to_string())
}

fn parse_granularity(s: &str) -> Result<GateGranularity, String> {
    s.parse().map_err(|e: gfus::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: gfus::Error| e.to_string())
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value = "greedy", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// 0 keeps the whole vocabulary.
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl From<DecodeArgs> for DecodeConfig {
    fn from(a: DecodeArgs) -> Self {
        DecodeConfig {
            strategy: a.strategy,
            temperature: a.temperature,
            top_k: a.top_k,
            max_len: a.max_len,
            seed: a.seed,
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BuildVocab {
            corpus,
            min_freq,
            max_size,
            out,
        } => commands::build_vocab(&corpus, min_freq, max_size, &out),
        Command::Train {
            config,
            overrides,
            seed,
            data,
            out,
        } => {
            let mut run = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            run.apply_overrides(&overrides)?;
            if let Some(s) = seed {
                run.set_seed(s);
            }
            if data.is_some() {
                run.data.train = data;
            }
            if out.is_some() {
                run.output_dir = out;
            }
            commands::train(run)
        }
        Command::Generate {
            checkpoint,
            vocab,
            input,
            input_file,
            decode,
        } => commands::generate(
            &checkpoint,
            vocab.as_deref(),
            input.as_deref(),
            input_file.as_deref(),
            &decode.into(),
        ),
        Command::Eval {
            checkpoints,
            names,
            test,
            vocab,
            auto_split,
            decode,
            out,
        } => {
            let pairing = match auto_split {
                Some(f) if f > 0.0 && f <= 1.0 => PairingMode::AutoSplit { prefix_fraction: f },
                Some(f) => return Err(CliError::Usage(format!("--auto-split must lie in (0, 1], got {f}"))),
                None => PairingMode::PairedTsv,
            };
            commands::eval(commands::EvalArgs {
                checkpoints: &checkpoints,
                names: &names,
                vocab: vocab.as_deref(),
                test: &test,
                pairing,
                decode: &decode.into(),
                out_dir: &out,
            })
        }
        Command::Synth {
            task: Task::Reversal,
            n,
            len,
            alphabet,
            seed,
            out,
        } => commands::synth(n, len, alphabet, seed, &out),
        Command::Gradcheck {
            seed,
            fusion_mode,
            gate_granularity,
            fault,
        } => commands::gradcheck(seed, fusion_mode, gate_granularity, fault.map(OpKind::from)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
