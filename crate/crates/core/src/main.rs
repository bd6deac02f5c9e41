use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use metamap::harness::commands;
use metamap::harness::{ExperimentConfig, Suite, TrainMode};
use metamap::{Error, Real};

#[derive(Parser)]
#[command(
    name = "mmeta",
    version,
    about = "Multimodal few-shot meta-learning over frozen backbones"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset container and manifest.
    GenerateData(Common),
    /// Meta-train (or train non-episodically) to the configured budget.
    Train(Common),
    /// Evaluate a checkpoint on one suite (default: standard).
    Eval(Common),
    /// Run one ablation suite, or all of them.
    Ablate(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Episodic,
    Nonepisodic,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "episodic")]
    mode: Mode,
    #[arg(long)]
    suite: Option<String>,
    /// e.g. `data=1,train=2,eval=3`
    #[arg(long)]
    seed_overrides: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Compatibility(_) | Error::Format(_) => 1,
        _ => 2,
    }
}

fn run<R: Real>(command: &Command, args: &Common, config: &ExperimentConfig) -> Result<(), Error> {
    match command {
        Command::GenerateData(_) => {
            let path = commands::dataset_path(&args.out_dir, args.dataset.as_deref());
            commands::generate_data(config, &path)?;
        }
        Command::Train(_) => {
            let dataset = args
                .dataset
                .as_deref()
                .ok_or_else(|| Error::config("train needs --dataset"))?;
            let mode = match args.mode {
                Mode::Episodic => TrainMode::Episodic,
                Mode::Nonepisodic => TrainMode::Nonepisodic,
            };
            commands::train::<R>(
                config,
                dataset,
                mode,
                args.checkpoint.as_deref(),
                &args.out_dir,
                None,
            )?;
        }
        Command::Eval(_) | Command::Ablate(_) => {
            let checkpoint = args
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::config("evaluation needs --checkpoint"))?;
            let suites = match (command, args.suite.as_deref()) {
                (Command::Eval(_), None) => vec![Suite::Standard],
                (Command::Ablate(_), None | Some("all")) => Suite::ABLATIONS.to_vec(),
                (_, Some(name)) => vec![Suite::parse(name)?],
                _ => unreachable!(),
            };
            commands::evaluate::<R>(
                config,
                checkpoint,
                args.dataset.as_deref(),
                &suites,
                &args.out_dir,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let args = match &cli.command {
        Command::GenerateData(a) | Command::Train(a) | Command::Eval(a) | Command::Ablate(a) => a,
    };
    let result = ExperimentConfig::load(&args.config).and_then(|mut config| {
        if let Some(spec) = &args.seed_overrides {
            config.apply_seed_overrides(spec)?;
            config.validate()?;
        }
        log::info!("config {} ({})", config.hash(), args.config.display());
        match args.precision {
            Precision::F64 => run::<f64>(&cli.command, args, &config),
            Precision::F32 => run::<f32>(&cli.command, args, &config),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
