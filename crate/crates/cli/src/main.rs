mod config;
mod error;
mod run;

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use offense_core::evaluation::Language;

use config::ExperimentConfig;
use error::CliError;

/// Offensive-language classifiers with cross-lingual transfer.
#[derive(Parser)]
#[command(name = "offense", version)]
struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config leaf, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Run directory; takes precedence over `output_dir` in the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let config = ExperimentConfig::load(&self.config, &self.overrides)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a freshly initialized model on `data.train`.
    Train(ConfigArgs),
    /// Start from `transfer.source_checkpoint`, then fine-tune on `data.train`.
    Transfer(ConfigArgs),
    /// Score a checkpoint on `data.eval`: report, heat map and table.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Majority-class baseline from `data.train`, scored on `data.eval`.
    Baseline(ConfigArgs),
    /// Write an untrained checkpoint for `data.train`'s label scheme.
    Init(ConfigArgs),
    /// Label each line of a file (or stdin) with a checkpoint; prints JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file, one text per line. Reads stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Lowercase input, matching `data.lowercase` at training time.
        #[arg(long)]
        lowercase: bool,
    },
    /// Comparison table across run directories that hold a `report.json`.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// english, bengali, hindi or spanish; sets the sort metric.
        #[arg(long)]
        language: String,
        /// Include published reference systems for the language.
        #[arg(long)]
        references: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a synthetic corpus in a dataset profile's layout.
    Generate {
        #[arg(long)]
        profile: String,
        /// Language code prefixed to content words (`en`, `bn`, ...).
        #[arg(long)]
        language: String,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print the JSON schema for experiment configs.
    Schema,
}

fn print_run(dir: PathBuf) {
    println!("{}", dir.display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => print_run(run::train(&args.load()?, args.output.as_deref())?),
        Command::Transfer(args) => print_run(run::transfer(&args.load()?, args.output.as_deref())?),
        Command::Evaluate { args, checkpoint } => {
            print_run(run::evaluate(&args.load()?, &checkpoint, args.output.as_deref())?)
        }
        Command::Baseline(args) => print_run(run::baseline(&args.load()?, args.output.as_deref())?),
        Command::Init(args) => print_run(run::init(&args.load()?, args.output.as_deref())?),
        Command::Predict {
            checkpoint,
            input,
            lowercase,
        } => {
            let stdout = io::stdout();
            let mut out = stdout.lock();
            run::predict(&checkpoint, input.as_deref(), lowercase, &mut out)?;
            out.flush()?;
        }
        Command::Report {
            runs,
            language,
            references,
            output,
        } => {
            let language = Language::parse(&language)
                .ok_or_else(|| CliError::Config(format!("unknown language `{language}`")))?;
            print!("{}", run::report(&runs, language, references, &output)?);
        }
        Command::Generate {
            profile,
            language,
            size,
            seed,
            output,
        } => run::generate(&profile, &language, size, seed, &output)?,
        Command::Schema => print!("{}", config::SCHEMA),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
