use std::path::PathBuf;
use std::process::ExitCode;

use bottrans_core::config::ExperimentConfig;
use bottrans_core::experiment::Variant;
use bottrans_core::pipeline::{self, Layout, TrainOptions};
use bottrans_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bottrans", version, about = "Cross-graph bot detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target graphs
    Generate(Common),
    /// Precompute orbit tables and ego signatures
    Orbits(Common),
    /// Train one variant
    Train(Common),
    /// Score the target with a trained checkpoint
    Evaluate(Common),
    /// Run all five variants over the configured seeds
    Ablate(Common),
    /// High-m / Low-m transfer tasks
    Tasks(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Seed offset added to the suite and training seeds
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (overrides experiment.out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variant name (overrides experiment.variant)
    #[arg(long)]
    variant: Option<String>,
    /// Dump the cross-domain topology of every batch during training
    #[arg(long)]
    trace_topology: bool,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Generate(c)
    | Command::Orbits(c)
    | Command::Train(c)
    | Command::Evaluate(c)
    | Command::Ablate(c)
    | Command::Tasks(c)) = &cli.command;
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(v) = &c.variant {
        cfg.experiment.variant = v.parse::<Variant>()?;
    }
    if let Some(out) = &c.out {
        cfg.experiment.out_dir = out.clone();
    }
    let layout = Layout::new(cfg.experiment.out_dir.clone());
    let variant = cfg.experiment.variant;
    match &cli.command {
        Command::Generate(_) => pipeline::cmd_generate(&cfg, &layout, c.seed)?,
        Command::Orbits(_) => pipeline::cmd_orbits(&cfg, &layout, c.seed)?,
        Command::Train(_) => pipeline::cmd_train(
            &cfg,
            &layout,
            TrainOptions {
                seed: c.seed,
                variant,
                trace_topology: c.trace_topology,
            },
        )?,
        Command::Evaluate(_) => pipeline::cmd_evaluate(&cfg, &layout, c.seed, variant)?,
        Command::Ablate(_) => pipeline::cmd_ablate(&cfg, &layout)?,
        Command::Tasks(_) => pipeline::cmd_tasks(&cfg, &layout)?,
    };
    Ok(())
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
