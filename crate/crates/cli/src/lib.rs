//! Staged command-line pipeline: donor screening, model comparison, ML-II
//! fitting, HMC over the loadings and causal effect reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
pub use pipeline::{run, run_pipeline, Context, Stage};

/// Loads and validates a config, applying command-line overrides.
pub fn resolve_config(
    path: &std::path::Path,
    seed: Option<u64>,
    out: Option<&std::path::Path>,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}
