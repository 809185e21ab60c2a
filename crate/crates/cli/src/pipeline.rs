//! The pipeline stages. Each reads its upstream artifacts from the output
//! directory, writes its own, and records itself in the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gpsc_core::causal::{CausalReport, UncertaintySources};
use gpsc_core::dataset::{self, DatasetMetadata, HeterotopicDataset};
use gpsc_core::evaluation::{self, combination_search, mix_seed, screen_dataset, ScoreCard, SearchConfig, Selection};
use gpsc_core::gp::FittedGp;
use gpsc_core::hmc::{self, counterfactual_posterior, hmc_sample, LoadingPosterior, SampledParams};
use gpsc_core::mogp::{Block, MogpStructure, ParamSelection};
use gpsc_core::model::{prepare, ModelData, ModelSpec, Window};
use gpsc_core::optimizer::fit_ml2;
use gpsc_core::stats::Summary;
use log::{info, warn};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{RunManifest, StageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Screen,
    Compare,
    Fit,
    Infer,
    Effect,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 5] = [Stage::Screen, Stage::Compare, Stage::Fit, Stage::Infer, Stage::Effect];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Screen => "screen",
            Stage::Compare => "compare",
            Stage::Fit => "fit",
            Stage::Infer => "infer",
            Stage::Effect => "effect",
            Stage::Report => "report",
        }
    }

    fn seed_stream(self) -> u64 {
        self as u64 + 1
    }
}

pub const SCREENING: &str = "screening.csv";
pub const SCORECARDS: &str = "scorecards.csv";
pub const SELECTION: &str = "selection.json";
pub const FIT: &str = "fit.json";
pub const HMC_DIAGNOSTICS: &str = "hmc_diagnostics.json";
pub const EFFECTS: &str = "effects.json";
pub const REPORT: &str = "report.json";

/// Persisted result of the fit stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub model: ModelSpec,
    pub donors: Vec<String>,
    /// Output series in model order.
    pub series_ids: Vec<String>,
    pub structure: MogpStructure,
    pub log_ml: f64,
    pub initial_log_ml: f64,
    pub status: String,
    /// Best log marginal likelihood of each optimizer run; `None` for failed runs.
    pub run_log_ml: Vec<Option<f64>>,
    pub jitter: f64,
    pub n_params: usize,
    /// Free hyperparameters on their natural scale.
    pub params: Vec<NamedValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub sources: UncertaintySources,
    pub k: usize,
    /// Hyperparameter draws skipped because the covariance failed to factor.
    pub skipped_draws: usize,
    pub cumulative: Summary,
    pub average: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplicative_average: Option<Summary>,
}

/// A resolved config plus runtime options.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
    hash: String,
}

impl Context {
    pub fn new(config: RunConfig, jobs: usize) -> Self {
        let hash = config.hash();
        Context {
            out: config.output_dir.clone(),
            config,
            jobs: jobs.max(1),
            hash,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&self, stage: Stage, stream: u64) -> u64 {
        mix_seed(self.config.seed, stage.seed_stream(), stream)
    }

    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                path: p,
                stage: stage.name(),
            })
        }
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, stage: Stage) -> Result<T, CliError> {
        let p = self.require(name, stage)?;
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Default)]
struct StageOutput {
    artifacts: Vec<String>,
    details: serde_json::Value,
    warnings: Vec<String>,
}

impl StageOutput {
    fn wrote(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    fn write_json<T: Serialize>(&mut self, ctx: &Context, name: &str, value: &T) -> Result<(), CliError> {
        let p = ctx.path(name);
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        self.wrote(name);
        Ok(())
    }
}

/// Runs one stage and records it in the manifest, whether or not it succeeded.
pub fn run(ctx: &Context, stage: Stage) -> Result<(), CliError> {
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::io(&ctx.out, e))?;
    info!("stage {}", stage.name());
    let start = Instant::now();
    let mut out = StageOutput::default();
    let result = match stage {
        Stage::Screen => screen(ctx, &mut out),
        Stage::Compare => compare(ctx, &mut out),
        Stage::Fit => fit(ctx, &mut out),
        Stage::Infer => infer(ctx, &mut out),
        Stage::Effect => effect(ctx, &mut out),
        Stage::Report => report(ctx, &mut out),
    };
    let mut manifest = RunManifest::load_or_new(&ctx.out, &ctx.hash, ctx.config.seed)?;
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            config_hash: ctx.hash.clone(),
            status: if result.is_ok() { "ok" } else { "failed" }.into(),
            error: result.as_ref().err().map(|e| e.to_string()),
            seconds: start.elapsed().as_secs_f64(),
            artifacts: out.artifacts,
            details: out.details,
            warnings: out.warnings,
        },
    );
    manifest.write(&ctx.out)?;
    result
}

/// Runs screen through effect in order.
pub fn run_pipeline(ctx: &Context) -> Result<(), CliError> {
    Stage::PIPELINE.iter().try_for_each(|&s| run(ctx, s))
}

/// Ingests the configured CSV and applies the configured transforms.
pub fn load_dataset(config: &RunConfig) -> Result<(HeterotopicDataset, DatasetMetadata, Vec<String>), CliError> {
    let (mut ds, report) = dataset::ingest_csv(&config.data.path, &config.schema())?;
    let mut transforms = Vec::new();
    let mut warnings = report.warnings.clone();
    if let Some(lp) = &config.data.log_per_capita {
        ds.apply_log_per_capita(&report.populations, lp.per, lp.floor)?;
        transforms.push(format!("log per capita (per {}, floor {})", lp.per, lp.floor));
    }
    if let Some(p) = &config.data.pca {
        warnings.extend(ds.apply_pca(&p.columns, &p.name)?);
        transforms.push(format!("first principal component of {} as `{}`", p.columns.join(", "), p.name));
    }
    if config.data.standardize_covariates {
        ds.standardize_covariates();
        transforms.push("covariates standardized per series".into());
    }
    let meta = DatasetMetadata::new(&ds, &report, transforms);
    Ok((ds, meta, warnings))
}

fn screen(ctx: &Context, out: &mut StageOutput) -> Result<(), CliError> {
    let (ds, meta, warnings) = load_dataset(&ctx.config)?;
    warnings.into_iter().for_each(|w| out.warn(w));
    dataset::write_csv(&ds, &ctx.path("dataset.csv"))?;
    out.wrote("dataset.csv");
    dataset::write_metadata(&meta, &ctx.path("dataset_metadata.json"))?;
    out.wrote("dataset_metadata.json");

    let screening = screen_dataset(&ds, ctx.config.screening.top_n)?;
    screening.warnings.into_iter().for_each(|w| out.warn(w));
    let p = ctx.path(SCREENING);
    let mut w = csv::Writer::from_path(&p).map_err(gpsc_core::Error::from)?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["rank", "series_id", "distance"])?;
        for (i, d) in screening.ranked.iter().enumerate() {
            w.write_record([(i + 1).to_string(), d.series_id.clone(), d.distance.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(gpsc_core::Error::from)?;
    out.wrote(SCREENING);
    out.details = json!({
        "series": ds.m(),
        "total_observations": ds.total_t(),
        "candidates": ds.m() - 1,
        "top_n": ctx.config.screening.top_n,
        "retained": screening.ranked.len(),
    });
    Ok(())
}

fn read_screening(ctx: &Context) -> Result<Vec<String>, CliError> {
    let p = ctx.require(SCREENING, Stage::Screen)?;
    let mut r = csv::Reader::from_path(&p).map_err(gpsc_core::Error::from)?;
    let col = r
        .headers()
        .map_err(gpsc_core::Error::from)?
        .iter()
        .position(|h| h == "series_id")
        .ok_or_else(|| CliError::Config(format!("{} has no series_id column", p.display())))?;
    r.records()
        .map(|rec| Ok(rec.map_err(gpsc_core::Error::from)?[col].to_string()))
        .collect()
}

fn compare(ctx: &Context, out: &mut StageOutput) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let donors = match &cfg.screening.donors {
        Some(d) => d.clone(),
        None => read_screening(ctx)?,
    };
    if donors.len() < cfg.screening.choose {
        return Err(CliError::Config(format!(
            "screening.choose: cannot choose {} of {} donors",
            cfg.screening.choose,
            donors.len()
        )));
    }
    let (ds, _, _) = load_dataset(cfg)?;
    let search = SearchConfig {
        choose: cfg.screening.choose,
        split_ratio: cfg.screening.split_ratio,
        es_samples: cfg.screening.es_samples,
        noise_floor: cfg.models.noise_floor,
        optimizer: cfg.optimizer.clone(),
        seed: ctx.seed(Stage::Compare, 0),
        jobs: ctx.jobs,
    };
    let cards = combination_search(&ds, &donors, &cfg.models.specs, &search)?;
    evaluation::write_scorecards(&cards, &ctx.path(SCORECARDS))?;
    out.wrote(SCORECARDS);
    let failed = cards.iter().filter(|c| !c.is_ok()).count();
    let combinations = evaluation::combinations(donors.len(), cfg.screening.choose).len();
    out.details = json!({
        "donors": donors,
        "combinations": combinations,
        "models": cfg.models.specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        "attempts": cards.len(),
        "failed": failed,
    });
    if failed > 0 {
        out.warn(format!("{failed} of {} fits failed", cards.len()));
    }
    let selection = evaluation::select(&cards, &cfg.models.specs).ok_or_else(|| {
        CliError::Numerical(format!(
            "all {} fits failed; first error: {}",
            cards.len(),
            cards.first().map(|c: &ScoreCard| c.status.as_str()).unwrap_or("none")
        ))
    })?;
    info!(
        "selected {} with donors {} (energy score {})",
        selection.model.name,
        selection.donors.join(", "),
        selection.energy_score
    );
    out.write_json(ctx, SELECTION, &selection)
}

/// Panel restricted to the selected donors, with its model layout.
fn selected_data(ctx: &Context, model: &ModelSpec, donors: &[String]) -> Result<ModelData, CliError> {
    let (ds, _, _) = load_dataset(&ctx.config)?;
    let ds = ds.subset(donors)?;
    Ok(prepare(&ds, model.variant, &Window::counterfactual(&ds))?)
}

/// Reloads the persisted fit and conditions it on the training data again.
pub fn load_fit(ctx: &Context) -> Result<(FitRecord, ModelData, FittedGp), CliError> {
    let rec: FitRecord = ctx.read_json(FIT, Stage::Fit)?;
    let md = selected_data(ctx, &rec.model, &rec.donors)?;
    if md.series_ids != rec.series_ids {
        return Err(CliError::Config(format!(
            "data series {:?} differ from the fitted model's {:?}; rerun `gpsc fit`",
            md.series_ids, rec.series_ids
        )));
    }
    let gp = FittedGp::new(rec.structure.clone(), md.train.blocks.clone(), md.train.y.clone())?;
    Ok((rec, md, gp))
}

fn fit(ctx: &Context, out: &mut StageOutput) -> Result<(), CliError> {
    let sel: Selection = ctx.read_json(SELECTION, Stage::Compare)?;
    let md = selected_data(ctx, &sel.model, &sel.donors)?;
    let structure = md.build(&sel.model, ctx.config.models.noise_floor)?;
    let mut opt = ctx.config.optimizer.clone();
    opt.seed = ctx.seed(Stage::Fit, 0);
    let fit = fit_ml2(&structure, &md.train, &opt)?;
    if !fit.status.is_converged() {
        out.warn(format!("optimizer stopped with status {:?}", fit.status));
    }
    if fit.failed_runs > 0 {
        out.warn(format!("{} optimizer runs failed", fit.failed_runs));
    }
    let s = &fit.gp.structure;
    let params = fit
        .params
        .iter()
        .map(|p| NamedValue {
            name: p.name.clone(),
            value: s.get(p.kind),
        })
        .collect();
    let rec = FitRecord {
        model: sel.model.clone(),
        donors: sel.donors.clone(),
        series_ids: md.series_ids.clone(),
        structure: s.clone(),
        log_ml: fit.gp.log_ml,
        initial_log_ml: fit.initial_log_ml,
        status: format!("{:?}", fit.status),
        run_log_ml: fit.run_log_ml.iter().map(|v| v.is_finite().then_some(*v)).collect(),
        jitter: fit.gp.jitter(),
        n_params: fit.params.len(),
        params,
    };
    out.write_json(ctx, FIT, &rec)?;

    let p = ctx.path("fit_trace.csv");
    let mut w = csv::Writer::from_path(&p).map_err(gpsc_core::Error::from)?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["iter", "f", "proj_grad_norm"])?;
        for r in &fit.trace {
            w.write_record([r.iter.to_string(), r.f.to_string(), r.proj_grad_norm.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(gpsc_core::Error::from)?;
    out.wrote("fit_trace.csv");

    export_kernel(ctx, out, &md, s)?;
    let coreg: Vec<_> = s
        .terms
        .iter()
        .map(|t| {
            let b = t.coregionalization.matrix();
            json!({
                "slice": t.slice,
                "kernel": t.kernel,
                "b": b.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            })
        })
        .collect();
    out.write_json(ctx, "coregionalization.json", &json!({ "series": md.series_ids, "terms": coreg }))?;
    out.details = json!({
        "model": sel.model.name,
        "log_ml": rec.log_ml,
        "status": rec.status,
        "n_params": rec.n_params,
        "noise_floor": ctx.config.models.noise_floor,
        "restarts": opt.restarts,
    });
    Ok(())
}

/// Writes the noise-free covariance over every observation of the modelled
/// series, treated post-period included, plus a row index.
fn export_kernel(ctx: &Context, out: &mut StageOutput, md: &ModelData, s: &MogpStructure) -> Result<(), CliError> {
    let blocks: Vec<Block> = md
        .train
        .blocks
        .iter()
        .map(|b| {
            if b.series != md.treated {
                return b.clone();
            }
            let extra: Vec<&Block> = md.test.iter().filter(|t| t.series == b.series).collect();
            let rows = b.len() + extra.iter().map(|t| t.len()).sum::<usize>();
            let mut x = DMatrix::zeros(rows, b.inputs.ncols());
            x.rows_mut(0, b.len()).copy_from(&b.inputs);
            let mut at = b.len();
            for t in extra {
                x.rows_mut(at, t.len()).copy_from(&t.inputs);
                at += t.len();
            }
            Block::new(b.series, x)
        })
        .collect();
    let k = s.covariance(&blocks, &blocks)?;
    write_matrix(&ctx.path("kernel_matrix.csv"), &k)?;
    out.wrote("kernel_matrix.csv");
    let p = ctx.path("kernel_index.csv");
    let mut w = csv::Writer::from_path(&p).map_err(gpsc_core::Error::from)?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["row", "series_id", "time"])?;
        let mut row = 0;
        for b in &blocks {
            for r in 0..b.len() {
                w.write_record([row.to_string(), md.series_ids[b.series].clone(), b.inputs[(r, 0)].to_string()])?;
                row += 1;
            }
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(gpsc_core::Error::from)?;
    out.wrote("kernel_index.csv");
    Ok(())
}

/// Headerless numeric CSV.
fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut text = String::with_capacity(m.nrows() * m.ncols() * 20);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn samples_file(sampled: SampledParams) -> String {
    format!("samples_{}.csv", UncertaintySources::from(sampled).tag())
}

fn chains(ctx: &Context) -> Vec<SampledParams> {
    let mut v = vec![SampledParams::Loadings];
    if ctx.config.hmc.sample_noise {
        v.push(SampledParams::LoadingsAndNoise);
    }
    v
}

fn infer(ctx: &Context, out: &mut StageOutput) -> Result<(), CliError> {
    let (rec, _, gp) = load_fit(ctx)?;
    let hc = &ctx.config.hmc;
    let mut diagnostics = serde_json::Map::new();
    for (i, sampled) in chains(ctx).into_iter().enumerate() {
        let target = LoadingPosterior::from_fit(&gp, sampled, hc.prior)?;
        if target.params.is_empty() {
            out.warn(format!("{} has no parameters to sample for {:?}", rec.model.name, sampled));
            continue;
        }
        let mut sampler = hc.sampler.clone();
        sampler.seed = ctx.seed(Stage::Infer, i as u64);
        info!("hmc over {} parameters ({:?})", target.params.len(), sampled);
        let chain = hmc_sample(&target, &target.initial(), &sampler)?;
        chain.diagnostics.warnings.iter().for_each(|w| out.warn(w.clone()));
        let names: Vec<String> = target.params.iter().map(|p| p.name.clone()).collect();
        let header = json!({
            "model": rec.model.name,
            "sampled": sampled,
            "coordinates": "loadings as is, variances as natural logarithms",
            "sampler": sampler,
            "prior": hc.prior,
            "acceptance_rate": chain.diagnostics.acceptance_rate,
        });
        let file = samples_file(sampled);
        hmc::write_samples(&ctx.path(&file), &names, &chain.samples, &header)?;
        out.wrote(&file);
        diagnostics.insert(UncertaintySources::from(sampled).tag().to_string(), serde_json::to_value(&chain.diagnostics)?);
    }
    out.write_json(ctx, HMC_DIAGNOSTICS, &diagnostics)?;
    out.details = json!({
        "step_size": hc.sampler.step_size,
        "n_leapfrog": hc.sampler.n_leapfrog,
        "n_samples": hc.sampler.n_samples,
        "burn_in": hc.sampler.burn_in,
        "prior": hc.prior,
        "chains": diagnostics.iter().map(|(k, d)| (k.clone(), json!({
            "acceptance_rate": d["acceptance_rate"],
            "divergences": d["divergences"],
            "status": d["status"],
        }))).collect::<serde_json::Map<_, _>>(),
    });
    Ok(())
}

/// Evenly spaced rows, at most `max`.
fn thin(draws: DMatrix<f64>, max: Option<usize>) -> DMatrix<f64> {
    match max {
        Some(max) if max > 0 && draws.nrows() > max => {
            let n = draws.nrows();
            let rows: Vec<usize> = (0..max).map(|i| i * n / max).collect();
            draws.select_rows(&rows)
        }
        _ => draws,
    }
}

fn effect(ctx: &Context, out: &mut StageOutput) -> Result<(), CliError> {
    let (rec, md, gp) = load_fit(ctx)?;
    let cfg = &ctx.config;
    let structure = &gp.structure;

    // Hyperparameter draws per tier; the function-only tier holds θ* fixed.
    let mut tiers: Vec<(UncertaintySources, Vec<gpsc_core::mogp::ParamInfo>, DMatrix<f64>, usize)> = Vec::new();
    let fixed_params = structure.parameters(ParamSelection::Loadings);
    for sampled in chains(ctx) {
        let params = structure.parameters(sampled.selection());
        if params.is_empty() {
            continue;
        }
        let p = ctx.require(&samples_file(sampled), Stage::Infer)?;
        let (names, draws) = hmc::read_samples(&p)?;
        let expected: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        if names != expected {
            return Err(CliError::Config(format!(
                "{} does not match the fitted model; rerun `gpsc infer`",
                p.display()
            )));
        }
        tiers.push((sampled.into(), params, thin(draws, cfg.hmc.max_draws), cfg.hmc.paths_per_draw));
    }
    let k = tiers
        .first()
        .map(|t| t.2.nrows() * t.3)
        .unwrap_or_else(|| cfg.hmc.max_draws.unwrap_or(cfg.hmc.sampler.n_samples) * cfg.hmc.paths_per_draw);
    let theta = DMatrix::from_row_slice(1, fixed_params.len(), &structure.values(&fixed_params));
    tiers.insert(0, (UncertaintySources::FunctionOnly, fixed_params, theta, k));

    let log_scale = cfg.log_scale();
    let mut summaries = Vec::new();
    for (i, (sources, params, draws, n_pred)) in tiers.iter().enumerate() {
        info!("counterfactuals for {} ({} draws)", sources.tag(), draws.nrows());
        let cf = counterfactual_posterior(
            structure,
            params,
            draws,
            &md.train.blocks,
            &md.train.y,
            &md.test,
            *n_pred,
            cfg.effects.observation_noise,
            ctx.seed(Stage::Effect, i as u64),
        )?;
        if cf.skipped > 0 {
            out.warn(format!("{}: {} draws skipped (covariance not factorizable)", sources.tag(), cf.skipped));
        }
        let paths = md.paths_to_original(&cf.paths);
        let report = CausalReport::compute(&md.test_times, &md.y_test, &paths, cfg.effects.level, log_scale, *sources)?;
        let tag = sources.tag();
        let name = format!("effect_{tag}.json");
        report.write_json(&ctx.path(&name))?;
        out.wrote(&name);
        let name = format!("pointwise_{tag}.csv");
        report.write_pointwise_csv(&ctx.path(&name))?;
        out.wrote(&name);
        let name = format!("cumulative_{tag}.csv");
        report.write_cumulative_csv(&ctx.path(&name))?;
        out.wrote(&name);
        let name = format!("multiplicative_{tag}.csv");
        if report.write_multiplicative_csv(&ctx.path(&name))? {
            out.wrote(&name);
        }
        let name = format!("counterfactual_{tag}.csv");
        write_bands(&ctx.path(&name), &md, &paths, cfg.effects.level)?;
        out.wrote(&name);
        summaries.push(TierSummary {
            sources: *sources,
            k: report.k,
            skipped_draws: cf.skipped,
            cumulative: report.cumulative,
            average: report.average,
            multiplicative_average: report.multiplicative.as_ref().map(|m| m.average),
        });
    }
    out.write_json(
        ctx,
        EFFECTS,
        &json!({
            "model": rec.model.name,
            "donors": rec.donors,
            "level": cfg.effects.level,
            "log_scale": log_scale,
            "observation_noise": cfg.effects.observation_noise,
            "horizon": md.test_times.len(),
            "tiers": summaries,
        }),
    )?;
    out.details = json!({
        "tiers": summaries.iter().map(|s| s.sources.tag()).collect::<Vec<_>>(),
        "level": cfg.effects.level,
        "log_scale": log_scale,
    });
    Ok(())
}

/// Counterfactual bands next to the observed outcome, one row per time.
fn write_bands(path: &Path, md: &ModelData, paths: &DMatrix<f64>, level: f64) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(gpsc_core::Error::from)?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["time", "observed", "mean", "lower", "median", "upper"])?;
        for (t, time) in md.test_times.iter().enumerate() {
            let s = Summary::of(paths.column(t).as_slice(), level);
            w.write_record([
                time.to_string(),
                md.y_test[t].to_string(),
                s.mean.to_string(),
                s.lower.to_string(),
                s.median.to_string(),
                s.upper.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(gpsc_core::Error::from)?;
    Ok(())
}

fn report(ctx: &Context, out: &mut StageOutput) -> Result<(), CliError> {
    let manifest_path = ctx.require(crate::manifest::FILE, Stage::Screen)?;
    let manifest = RunManifest::read(manifest_path.parent().expect("file has a parent"))?;
    let optional = |name: &str| -> Result<serde_json::Value, CliError> {
        let p = ctx.path(name);
        if !p.is_file() {
            return Ok(serde_json::Value::Null);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    };
    let fit = optional(FIT)?;
    let fit_summary = if fit.is_null() {
        fit
    } else {
        json!({
            "model": fit["model"],
            "donors": fit["donors"],
            "log_ml": fit["log_ml"],
            "status": fit["status"],
            "n_params": fit["n_params"],
            "params": fit["params"],
        })
    };
    let stages: serde_json::Map<_, _> = manifest
        .stages
        .iter()
        .map(|(k, s)| (k.clone(), json!({ "status": s.status, "error": s.error, "warnings": s.warnings })))
        .collect();
    let bundle = json!({
        "version": manifest.version,
        "config_hash": ctx.hash,
        "seed": ctx.config.seed,
        "stages": stages,
        "artifacts": manifest.artifacts(),
        "selection": optional(SELECTION)?,
        "fit": fit_summary,
        "hmc": optional(HMC_DIAGNOSTICS)?,
        "effects": optional(EFFECTS)?,
    });
    out.write_json(ctx, REPORT, &bundle)
}
