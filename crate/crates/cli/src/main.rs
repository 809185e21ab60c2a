use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpsc_cli::{resolve_config, run, Context, Stage};

#[derive(Parser)]
#[command(name = "gpsc", version, about = "Bayesian synthetic control with multi-output Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank control series by DTW distance to the treated pre-period.
    Screen(Common),
    /// Fit every donor subset with every model and pick the lowest energy score.
    Compare(Common),
    /// Type-II maximum likelihood fit of the selected model.
    Fit(Common),
    /// HMC over the loadings of the fitted model.
    Infer(Common),
    /// Counterfactual paths and causal effect summaries.
    Effect(Common),
    /// Bundle the manifest and stage summaries.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for model comparison.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Screen(a) => (Stage::Screen, a),
        Command::Compare(a) => (Stage::Compare, a),
        Command::Fit(a) => (Stage::Fit, a),
        Command::Infer(a) => (Stage::Infer, a),
        Command::Effect(a) => (Stage::Effect, a),
        Command::Report(a) => (Stage::Report, a),
    };
    let result = resolve_config(&args.config, args.seed, args.out.as_deref())
        .and_then(|cfg| run(&Context::new(cfg, args.jobs), stage));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
