use std::path::{Path, PathBuf};

use gpsc_core::dataset::{CsvSchema, ThresholdRule, TimeFormat};
use gpsc_core::hmc::{HmcConfig, PriorSpec};
use gpsc_core::model::ModelSpec;
use gpsc_core::mogp::Variant;
use gpsc_core::optimizer::OptimizerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub screening: ScreeningConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub hmc: HmcSection,
    #[serde(default)]
    pub effects: EffectsConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "default_series_column")]
    pub series_column: String,
    #[serde(default = "default_time_column")]
    pub time_column: String,
    #[serde(default = "default_outcome_column")]
    pub outcome_column: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub treated: String,
    /// First post-intervention time, in the time column's format.
    pub intervention: String,
    #[serde(default)]
    pub time_format: TimeFormat,
    #[serde(default)]
    pub threshold: ThresholdRule,
    #[serde(default)]
    pub population_column: Option<String>,
    /// Outcome becomes `ln(y · per / population + floor)`.
    #[serde(default)]
    pub log_per_capita: Option<LogPerCapita>,
    /// Collapse these covariates into their first principal component.
    #[serde(default)]
    pub pca: Option<PcaConfig>,
    #[serde(default = "yes")]
    pub standardize_covariates: bool,
}

fn default_series_column() -> String {
    "series_id".into()
}
fn default_time_column() -> String {
    "time".into()
}
fn default_outcome_column() -> String {
    "y".into()
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogPerCapita {
    #[serde(default = "default_per")]
    pub per: f64,
    #[serde(default = "default_log_floor")]
    pub floor: f64,
}

fn default_per() -> f64 {
    1e5
}
fn default_log_floor() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaConfig {
    pub columns: Vec<String>,
    #[serde(default = "default_pca_name")]
    pub name: String,
}

fn default_pca_name() -> String {
    "pc1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningConfig {
    pub top_n: usize,
    /// Donor subset size in the comparison stage.
    pub choose: usize,
    pub split_ratio: f64,
    /// Explicit donors; when set, the comparison stage skips the DTW ranking.
    pub donors: Option<Vec<String>>,
    /// Predictive draws per model for the energy score.
    pub es_samples: usize,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            top_n: 8,
            choose: 4,
            split_ratio: 2.0 / 3.0,
            donors: None,
            es_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub specs: Vec<ModelSpec>,
    /// Lower bound on every noise variance, in standardized outcome units.
    pub noise_floor: f64,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            specs: Variant::ALL.iter().map(|&v| ModelSpec::new(v)).collect(),
            noise_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcSection {
    #[serde(flatten)]
    pub sampler: HmcConfig,
    pub prior: PriorSpec,
    /// Also run a chain over loadings and noise variances.
    pub sample_noise: bool,
    /// Counterfactual paths drawn per hyperparameter draw.
    pub paths_per_draw: usize,
    /// Use at most this many evenly spaced draws for counterfactuals.
    pub max_draws: Option<usize>,
}

impl Default for HmcSection {
    fn default() -> Self {
        HmcSection {
            sampler: HmcConfig::default(),
            prior: PriorSpec::default(),
            sample_noise: false,
            paths_per_draw: 1,
            max_draws: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EffectsConfig {
    pub level: f64,
    /// Report multiplicative effects; defaults to on when the outcome is
    /// log-transformed.
    pub log_scale: Option<bool>,
    /// Include observation noise in counterfactual paths.
    pub observation_noise: bool,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        EffectsConfig {
            level: 0.95,
            log_scale: None,
            observation_noise: true,
        }
    }
}

impl RunConfig {
    /// Parses a TOML config; relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if !self.data.path.is_file() {
            return bad("data.path", format!("{} does not exist", self.data.path.display()));
        }
        if self.data.log_per_capita.is_some() && self.data.population_column.is_none() {
            return bad("data.population_column", "required by data.log_per_capita".into());
        }
        if let Some(l) = &self.data.log_per_capita {
            if !(l.per > 0.0) {
                return bad("data.log_per_capita.per", "must be positive".into());
            }
            if !(l.floor >= 0.0) {
                return bad("data.log_per_capita.floor", "must be non-negative".into());
            }
        }
        if self.screening.top_n == 0 {
            return bad("screening.top_n", "must be at least 1".into());
        }
        if self.screening.choose == 0 {
            return bad("screening.choose", "must be at least 1".into());
        }
        if !(self.screening.split_ratio > 0.0 && self.screening.split_ratio < 1.0) {
            return bad("screening.split_ratio", format!("{} not in (0, 1)", self.screening.split_ratio));
        }
        if self.models.specs.is_empty() {
            return bad("models.specs", "at least one model is required".into());
        }
        let mut names: Vec<&str> = self.models.specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("models.specs", "model names must be unique".into());
        }
        if !(self.models.noise_floor >= 0.0) {
            return bad("models.noise_floor", "must be non-negative".into());
        }
        if self.optimizer.memory == 0 {
            return bad("optimizer.memory", "must be at least 1".into());
        }
        self.hmc.sampler.validate().or_else(|e| bad("hmc", e.to_string()))?;
        self.hmc.prior.validate().or_else(|e| bad("hmc.prior", e.to_string()))?;
        if self.hmc.paths_per_draw == 0 {
            return bad("hmc.paths_per_draw", "must be at least 1".into());
        }
        if !(self.effects.level > 0.0 && self.effects.level < 1.0) {
            return bad("effects.level", format!("{} not in (0, 1)", self.effects.level));
        }
        Ok(())
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            series_column: self.data.series_column.clone(),
            time_column: self.data.time_column.clone(),
            outcome_column: self.data.outcome_column.clone(),
            covariate_columns: self.data.covariates.clone(),
            treated: self.data.treated.clone(),
            intervention: self.data.intervention.clone(),
            time_format: self.data.time_format,
            threshold: self.data.threshold,
            population_column: self.data.population_column.clone(),
        }
    }

    pub fn log_scale(&self) -> bool {
        self.effects.log_scale.unwrap_or(self.data.log_per_capita.is_some())
    }

    /// SHA-256 of the canonical serialized config. The output directory is
    /// left out so a relocated run keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
