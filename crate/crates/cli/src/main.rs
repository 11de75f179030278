mod commands;
mod config;
mod errors;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use errors::{ErrorReport, UsageError};
use output::GridFormat;

#[derive(Debug, Parser)]
#[command(name = "tcmap", version, about = "Tree-crop mapping pipeline stages")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON pipeline config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Encoding of raster outputs.
    #[arg(long, global = true, value_enum, default_value = "ntg1")]
    format: GridFormat,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Seasonal composites from an observation manifest.
    Composite(commands::CompositeArgs),
    /// Stratified random sample from a binary tree-crop map.
    Sample(commands::SampleArgs),
    /// Spatially blocked train/val/test split of a sample list.
    Split(commands::SplitArgs),
    /// Accuracy report from an error matrix or labelled samples.
    Assess(commands::AssessArgs),
    /// Adjusted areas and regional scaling.
    Area(commands::AreaArgs),
    /// Ensemble fusion, entropy, thresholding and reliability.
    Calibrate(commands::CalibrateArgs),
    /// Tree-crop area per forest-loss year.
    LossOverlap(commands::LossOverlapArgs),
    /// Tree-crop density by distance to protected-area boundaries.
    PaProfile(commands::PaProfileArgs),
    /// Tree-crop density on a hexagonal lattice.
    Hex(commands::HexArgs),
    /// Cross-tabulation of two binary maps.
    Agree(commands::AgreeArgs),
    /// Per-pixel class logits from seasonal S1 and S2 stacks.
    ModelForward(commands::ModelForwardArgs),
    /// Parameter count of the model config.
    ParamCount,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Composite(_) => "composite",
            Command::Sample(_) => "sample",
            Command::Split(_) => "split",
            Command::Assess(_) => "assess",
            Command::Area(_) => "area",
            Command::Calibrate(_) => "calibrate",
            Command::LossOverlap(_) => "loss-overlap",
            Command::PaProfile(_) => "pa-profile",
            Command::Hex(_) => "hex",
            Command::Agree(_) => "agree",
            Command::ModelForward(_) => "model-forward",
            Command::ParamCount => "param-count",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(UsageError("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Context { config, format: cli.global.format };
    let name = cli.command.name();
    let (artifacts, inputs) = match cli.command {
        Command::Composite(a) => commands::composite(&ctx, a)?,
        Command::Sample(a) => commands::sample(&ctx, a)?,
        Command::Split(a) => commands::split(&ctx, a)?,
        Command::Assess(a) => commands::assess(&ctx, a)?,
        Command::Area(a) => commands::area(&ctx, a)?,
        Command::Calibrate(a) => commands::calibrate(&ctx, a)?,
        Command::LossOverlap(a) => commands::loss_overlap(&ctx, a)?,
        Command::PaProfile(a) => commands::pa_profile(&ctx, a)?,
        Command::Hex(a) => commands::hex(&ctx, a)?,
        Command::Agree(a) => commands::agree(&ctx, a)?,
        Command::ModelForward(a) => commands::model_forward(&ctx, a)?,
        Command::ParamCount => commands::param_count(&ctx)?,
    };
    // a closed stdout must not fail a run whose outputs are already written
    let mut stdout = std::io::stdout().lock();
    for path in artifacts.commit(&cli.global.out, name, ctx.config.seed, &inputs)? {
        let _ = writeln!(stdout, "{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = errors::category(&err);
            let report = ErrorReport { category, message: format!("{err:#}") };
            eprintln!("{}", serde_json::json!({ "error": report }));
            ExitCode::from(errors::exit_code(category) as u8)
        }
    }
}
