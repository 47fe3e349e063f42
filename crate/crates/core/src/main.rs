use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lidda::journey::Method;
use lidda::model::CalibrationMode;
use lidda::pipeline::{run_all, run_stage, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "lidda", version, about = "Attention-based multi-touch attribution pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; every stage derives its own sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, global = true, value_enum)]
    calibration: Option<CalibrationArg>,
    /// Calibration weight.
    #[arg(long, global = true)]
    beta: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Generate,
    Preprocess,
    Impute,
    Train,
    Attribute,
    Validate,
    Report,
    /// Every stage in order.
    All,
}

#[derive(ValueEnum, Clone, Copy)]
#[value(rename_all = "snake_case")]
enum MethodArg {
    Attention,
    Incremental,
    LastTouch,
}

#[derive(ValueEnum, Clone, Copy)]
#[value(rename_all = "snake_case")]
enum CalibrationArg {
    None,
    BatchMse,
    BatchKl,
    PathMse,
    PathKl,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Ok(n) = std::env::var("LIDDA_THREADS") {
        let n: usize = n.parse().map_err(|_| anyhow::anyhow!("LIDDA_THREADS must be a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let file = cli.config.ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let mut cfg = RunConfig::load(&file)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(c) = cli.calibration {
        cfg.model.calibration = match c {
            CalibrationArg::None => CalibrationMode::None,
            CalibrationArg::BatchMse => CalibrationMode::BatchMse,
            CalibrationArg::BatchKl => CalibrationMode::BatchKl,
            CalibrationArg::PathMse => CalibrationMode::PathMse,
            CalibrationArg::PathKl => CalibrationMode::PathKl,
        };
    }
    if let Some(b) = cli.beta {
        cfg.model.beta = b;
    }
    cfg.model.validate()?;
    let method = match cli.method.unwrap_or(MethodArg::Attention) {
        MethodArg::Attention => Method::Attention,
        MethodArg::Incremental => Method::Incremental,
        MethodArg::LastTouch => Method::LastTouch,
    };
    let stage = match cli.command {
        Command::Generate => Stage::Generate,
        Command::Preprocess => Stage::Preprocess,
        Command::Impute => Stage::Impute,
        Command::Train => Stage::Train,
        Command::Attribute => Stage::Attribute,
        Command::Validate => Stage::Validate,
        Command::Report => Stage::Report,
        Command::All => return Ok(run_all(&cfg)?),
    };
    run_stage(&cfg, stage, method)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
