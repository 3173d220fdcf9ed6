use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mnat::data::TaskKind;
use mnat_cli::commands::{
    self, EvaluateOptions, GenerateOptions, ProbeOptions, TrainOptions, TranslateOptions,
};
use mnat_cli::{CliError, RunConfig, Settings};

#[derive(Parser)]
#[command(
    name = "mnat",
    version,
    about = "Train and run mask-predict translation models"
)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, sampling and probing.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the averaged checkpoint.
    Train(TrainArgs),
    /// Translate a file of source sentences.
    Translate(TranslateArgs),
    /// Score hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Compare output distributions under mixed and ground-truth inputs.
    Probe(ProbeArgs),
    /// Write a synthetic parallel corpus.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Largest refinement depth used for training-time predictions.
    #[arg(long = "max-refine-iterations", short = 'K')]
    max_refine_iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    max_updates: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    average_last: Option<usize>,
    /// eecr or cmlm.
    #[arg(long)]
    objective: Option<String>,
    /// Training log path; defaults to train.log in the checkpoint directory.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, short = 'T')]
    iterations: Option<usize>,
    #[arg(long, short = 'B')]
    candidates: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hypotheses: PathBuf,
    #[arg(long)]
    references: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// copy, reverse, lexicon or multimodal_lexicon.
    #[arg(long)]
    task: TaskKind,
    /// Total ids including the four reserved ones.
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

fn flag<T: ToString>(s: &mut Settings, key: &str, v: &Option<T>) -> Result<(), CliError> {
    match v {
        Some(v) => s.apply_flag(key, v.to_string()),
        None => Ok(()),
    }
}

fn path_flag(s: &mut Settings, key: &str, v: &Option<PathBuf>) -> Result<(), CliError> {
    flag(s, key, &v.as_ref().map(|p| p.display().to_string()))
}

fn data_flags(s: &mut Settings, d: &DataArgs) -> Result<(), CliError> {
    path_flag(s, "data.vocab", &d.vocab)?;
    path_flag(s, "data.checkpoint_dir", &d.checkpoint_dir)
}

fn settings(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.load_file(path)?;
    }
    flag(&mut s, "seed", &cli.seed)?;
    match &cli.command {
        Command::Train(a) => {
            data_flags(&mut s, &a.data)?;
            path_flag(&mut s, "data.train", &a.train)?;
            path_flag(&mut s, "data.valid", &a.valid)?;
            flag(&mut s, "train.beta", &a.beta)?;
            flag(&mut s, "train.gamma", &a.gamma)?;
            flag(
                &mut s,
                "train.max_refine_iterations",
                &a.max_refine_iterations,
            )?;
            flag(&mut s, "train.base_lr", &a.lr)?;
            flag(&mut s, "train.warmup", &a.warmup)?;
            flag(&mut s, "train.token_budget", &a.token_budget)?;
            flag(&mut s, "train.max_updates", &a.max_updates)?;
            flag(&mut s, "train.max_epochs", &a.max_epochs)?;
            flag(&mut s, "train.checkpoint_every", &a.checkpoint_every)?;
            flag(&mut s, "train.average_last", &a.average_last)?;
            flag(&mut s, "train.objective", &a.objective)?;
        }
        Command::Translate(a) => {
            data_flags(&mut s, &a.data)?;
            flag(&mut s, "decode.iterations", &a.iterations)?;
            flag(&mut s, "decode.candidates", &a.candidates)?;
            flag(&mut s, "decode.batch_size", &a.batch_size)?;
        }
        Command::Probe(a) => {
            data_flags(&mut s, &a.data)?;
            flag(&mut s, "probe.beta", &a.beta)?;
            flag(&mut s, "probe.max_iterations", &a.max_iterations)?;
            flag(&mut s, "probe.sample_size", &a.sample_size)?;
        }
        Command::Evaluate(_) | Command::Generate(_) => {}
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&settings(&cli)?)?;
    match cli.command {
        Command::Train(a) => commands::train(&cfg, &TrainOptions { log: a.log }),
        Command::Translate(a) => commands::translate(
            &cfg,
            &TranslateOptions {
                checkpoint: a.checkpoint,
                input: a.input,
                output: a.output,
            },
        ),
        Command::Evaluate(a) => {
            let report = commands::evaluate(&EvaluateOptions {
                hypotheses: a.hypotheses,
                references: a.references,
            })?;
            print!("{report}");
            Ok(())
        }
        Command::Probe(a) => commands::probe(
            &cfg,
            &ProbeOptions {
                checkpoint: a.checkpoint,
                corpus: a.corpus,
                output: a.output,
            },
        ),
        Command::Generate(a) => commands::generate(
            &cfg,
            &GenerateOptions {
                task: a.task,
                vocab_size: a.vocab_size,
                count: a.count,
                max_len: a.max_len,
                output: a.output,
                vocab_out: a.vocab_out,
            },
        ),
    }
}

fn init_logging() {
    let level = match std::env::var("MNAT_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("MNAT_LOG={other:?} is not one of quiet, info, debug; using info");
            log::LevelFilter::Info
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                log::error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
