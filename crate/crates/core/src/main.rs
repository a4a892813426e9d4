use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srosda::dataio::{
    load_report, load_source, load_target, load_target_eval, read_text, save_dataset, save_report,
    synth_generate, SynthSpec,
};
use srosda::eval::{evaluate, render_report};
use srosda::model::load_checkpoint;
use srosda::trainer::{train_to_dir, TrainConfig};
use srosda::Result;

#[derive(Parser)]
#[command(name = "srosda", version, about = "Open-set domain adaptation with semantic recovery")]
struct Cli {
    /// Overrides the seed of the spec or training config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes checkpoint, history and pseudo labels.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against the dataset's evaluation labels.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a saved report as tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let mut spec = match spec {
                Some(path) => SynthSpec::from_key_values(&read_text(&path)?, &path)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let data = synth_generate(&spec)?;
            save_dataset(&data, &out)?;
            log::info!(
                "wrote {} source and {} target samples to {}",
                data.source.labels.len(),
                data.eval.labels.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::from_key_values(&read_text(&path)?, &path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let source = load_source(&data)?;
            let target = load_target(&data)?;
            let outcome = train_to_dir(&cfg, &source, &target, &out)?;
            if let Some(last) = outcome.history.epochs.last() {
                log::info!("final epoch loss {:.6}; outputs in {}", last.total, out.display());
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let target = load_target(&data)?;
            let eval = load_target_eval(&data)?;
            let report = evaluate(&ckpt, &target, &eval)?;
            save_report(&report, &out)?;
            if !cli.quiet {
                print!("{}", render_report(&report));
            }
        }
        Command::Report { input } => {
            let report = load_report(&input)?;
            print!("{}", render_report(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
