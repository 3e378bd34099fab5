//! `medform` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use medform::cli::{report, resolve_config, ConfigSource, Pipeline, Stage, StageStatus};

#[derive(Parser)]
#[command(name = "medform", version, about = "CT and clinical multimodal pretraining pipeline")]
struct Args {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages even when their completion record matches.
    #[arg(long, global = true)]
    force: bool,
    /// Dotted-path assignment such as `eval.k=5`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort under <out>/data.
    SynthGen,
    /// Window, mask and resample every volume into slice stacks.
    Preprocess,
    /// Contrastive pretraining of the slice encoder.
    PretrainSlice,
    /// Cross-modal alignment of pooled CT and clinical embeddings.
    TrainAlign,
    /// Baseline comparison and few-shot probing.
    Evaluate,
    /// Render the comparison table from a results directory.
    Report {
        /// Defaults to <out>/results.
        results_dir: Option<PathBuf>,
    },
    /// Every stage in dependency order.
    All,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MEDFORM_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| format!("MEDFORM_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        return Err("MEDFORM_THREADS must be >= 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(args: Args) -> medform::Result<()> {
    let src = ConfigSource { config: args.config, seed: args.seed, overrides: args.overrides, out: args.out };
    if let Command::Report { results_dir } = &args.command {
        let dir = match results_dir {
            Some(d) => d.clone(),
            None => Pipeline::new(resolve_config(&src)?, false).layout.results_dir(),
        };
        let table = report(&dir)?;
        print!("{}", table.to_text());
        let (txt, csv) = table.write(&dir)?;
        log::info!("wrote {} and {}", txt.display(), csv.display());
        return Ok(());
    }
    let pipeline = Pipeline::new(resolve_config(&src)?, args.force);
    let stages = match args.command {
        Command::SynthGen => vec![Stage::SynthGen],
        Command::Preprocess => vec![Stage::Preprocess],
        Command::PretrainSlice => vec![Stage::PretrainSlice],
        Command::TrainAlign => vec![Stage::TrainAlign],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::All => pipeline.plan(),
        Command::Report { .. } => unreachable!("handled above"),
    };
    for stage in stages {
        let status = pipeline.run(stage)?;
        let word = if status == StageStatus::Ran { "done" } else { "up to date" };
        println!("{}: {word}", stage.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
