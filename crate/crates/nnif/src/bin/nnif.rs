//! Command-line driver: runs pipeline stages against a run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use nnif::eval::LayerMode;
use nnif::pipeline::{Pipeline, RunConfig, StageName, StageOutcome};
use nnif::Error;

#[derive(Parser)]
#[command(
    name = "nnif",
    version,
    about = "Train a model, attack it, and detect the attacks from influence-ranked neighbors"
)]
struct Args {
    /// Run configuration (TOML); built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run directory (default: `<output_dir>/<run_name>` from the config)
    #[arg(long)]
    run_dir: Option<PathBuf>,

    /// Stage to run: train, attack, influence, features, detect, eval, or all
    #[arg(long, default_value = "all")]
    stage: String,

    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,

    /// Recompute the requested stage even when its cache is valid
    #[arg(long)]
    force: bool,

    /// Override which layers feed the feature stage: embedding or all
    #[arg(long)]
    layers: Option<String>,

    /// Override the training-set fraction used for test-point influence
    #[arg(long)]
    subsample_frac: Option<f64>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    // everything up to opening the run directory is user input handling
    let (cfg, stage) = match prepare(&args) {
        Ok(prepared) => prepared,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cfg, stage, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let user_error = matches!(
                e,
                Error::Config(_)
                    | Error::InvalidParameter(_)
                    | Error::MissingStage(_)
                    | Error::Locked(_)
            );
            ExitCode::from(if user_error { 1 } else { 2 })
        }
    }
}

fn prepare(args: &Args) -> Result<(RunConfig, Option<StageName>), Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let layers = args.layers.as_deref().map(LayerMode::parse).transpose()?;
    cfg.apply_overrides(args.seed, layers, args.subsample_frac)?;
    let stage = match args.stage.as_str() {
        "all" => None,
        s => Some(StageName::parse(s)?),
    };
    Ok((cfg, stage))
}

fn run(cfg: RunConfig, stage: Option<StageName>, args: &Args) -> Result<(), Error> {
    let run_dir = args
        .run_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(&cfg.run_name));
    let mut pipeline = Pipeline::open(cfg, &run_dir)?;
    let outcomes = match stage {
        Some(stage) => vec![(stage, pipeline.run(stage, args.force)?)],
        None => pipeline.run_all(args.force)?,
    };
    for (stage, outcome) in outcomes {
        match outcome {
            StageOutcome::Ran { wall } => {
                println!("stage {}: ran in {:.2}s", stage.as_str(), wall.as_secs_f64());
            }
            StageOutcome::Cached => println!("stage {}: cached", stage.as_str()),
        }
    }
    Ok(())
}
