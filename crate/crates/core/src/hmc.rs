//! Hamiltonian Monte Carlo over coregionalization loadings.
//!
//! The sampler works on any [`LogDensity`]. [`LoadingPosterior`] is the
//! target used for counterfactual inference: the GP log marginal likelihood
//! as a function of the loadings (and optionally the log noise variances),
//! with every other hyperparameter held at its type-II ML value.

use std::io::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{factorize, lml_from_factor, FittedGp};
use crate::mogp::{Block, MogpStructure, ParamInfo, ParamKind, ParamSelection};
use crate::stats::effective_sample_size;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub step_size: f64,
    /// Leapfrog steps per proposal.
    pub n_leapfrog: usize,
    /// Retained draws after burn-in.
    pub n_samples: usize,
    /// Fraction of the whole chain discarded as burn-in.
    pub burn_in: f64,
    /// Mass matrix rows; `None` is the identity.
    pub mass: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.01,
            n_leapfrog: 20,
            n_samples: 5000,
            burn_in: 0.2,
            mass: None,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size {} must be positive", self.step_size)));
        }
        if self.n_leapfrog == 0 || self.n_samples == 0 {
            return Err(Error::InvalidArgument("leapfrog steps and samples must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::InvalidArgument(format!("burn-in fraction {} not in [0, 1)", self.burn_in)));
        }
        Ok(())
    }

    /// Total chain length so that `n_samples` remain after burn-in.
    pub fn total_iterations(&self) -> usize {
        (self.n_samples as f64 / (1.0 - self.burn_in)).ceil() as usize
    }

    fn mass_matrix(&self, dim: usize) -> Result<Mass> {
        let m = match &self.mass {
            None => return Ok(Mass::Identity),
            Some(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::DimensionMismatch(format!("mass matrix must be {dim} x {dim}")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        if (0..dim).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * m[(i, j)].abs().max(1.0))) {
            return Err(Error::InvalidArgument("mass matrix is not symmetric".into()));
        }
        let chol = Cholesky::new(m.clone())
            .ok_or_else(|| Error::InvalidArgument("mass matrix is not positive definite".into()))?;
        let inv = chol.inverse();
        Ok(Mass::Dense { chol, inv })
    }
}

/// Momentum covariance `M`.
#[derive(Clone, Debug)]
pub enum Mass {
    Identity,
    Dense {
        chol: Cholesky<f64, Dyn>,
        inv: DMatrix<f64>,
    },
}

impl Mass {
    /// `M⁻¹ φ`.
    pub fn velocity(&self, mom: &[f64]) -> Vec<f64> {
        match self {
            Mass::Identity => mom.to_vec(),
            Mass::Dense { inv, .. } => (inv * DVector::from_column_slice(mom)).as_slice().to_vec(),
        }
    }

    pub fn kinetic(&self, mom: &[f64]) -> f64 {
        0.5 * mom.iter().zip(self.velocity(mom)).map(|(a, b)| a * b).sum::<f64>()
    }

    fn draw(&self, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        match self {
            Mass::Identity => z,
            Mass::Dense { chol, .. } => (chol.l() * DVector::from_vec(z)).as_slice().to_vec(),
        }
    }
}

/// Unnormalized log density with gradient. `None` means the density is zero
/// (or could not be evaluated) at `theta`.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)>;
}

impl<F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>> LogDensity for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        (self.1)(theta)
    }
}

/// A leapfrog trajectory left the region where the target is finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Divergence;

/// End state of a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

/// Integrates `L` leapfrog steps from `(theta, momentum)` with gradient
/// `grad0` of the log target at `theta`: a half momentum step, alternating
/// full position and momentum steps, and a closing half momentum step.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    theta: &[f64],
    momentum: &[f64],
    grad0: &[f64],
    step_size: f64,
    n_steps: usize,
    mass: &Mass,
) -> std::result::Result<Trajectory, Divergence> {
    let mut th = theta.to_vec();
    let mut mom = momentum.to_vec();
    let mut grad = grad0.to_vec();
    let mut logp = f64::NAN;
    for _ in 0..n_steps {
        axpy(&mut mom, 0.5 * step_size, &grad);
        let vel = mass.velocity(&mom);
        axpy(&mut th, step_size, &vel);
        let (lp, g) = target.log_density(&th).ok_or(Divergence)?;
        if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Divergence);
        }
        logp = lp;
        grad = g;
        axpy(&mut mom, 0.5 * step_size, &grad);
    }
    if n_steps == 0 {
        logp = target.log_density(&th).ok_or(Divergence)?.0;
    }
    if mom.iter().chain(&th).any(|v| !v.is_finite()) {
        return Err(Divergence);
    }
    Ok(Trajectory {
        theta: th,
        momentum: mom,
        log_density: logp,
        grad,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStatus {
    Ok,
    /// Fewer than 1% of retained proposals were accepted.
    LowAcceptance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub acceptance_rate: f64,
    pub divergences: usize,
    pub divergence_rate: f64,
    pub ess: Vec<f64>,
    pub status: ChainStatus,
    pub warnings: Vec<String>,
    pub total_iterations: usize,
    pub burn_in_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcOutput {
    /// `n_samples x dim` retained draws.
    pub samples: DMatrix<f64>,
    pub diagnostics: ChainDiagnostics,
}

/// Runs a Metropolis-corrected HMC chain from `init`, deterministic given
/// the configured seed.
pub fn hmc_sample<T: LogDensity + ?Sized>(target: &T, init: &[f64], config: &HmcConfig) -> Result<HmcOutput> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::DimensionMismatch(format!("start has {} coordinates, target {dim}", init.len())));
    }
    let mass = config.mass_matrix(dim)?;
    let (mut logp, mut grad) = target
        .log_density(init)
        .filter(|(lp, g)| lp.is_finite() && g.iter().all(|v| v.is_finite()))
        .ok_or(Error::NonFiniteStart)?;
    let mut theta = init.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.total_iterations();
    let burn = total - config.n_samples;
    let mut samples = DMatrix::zeros(config.n_samples, dim);
    let (mut accepted, mut divergences) = (0usize, 0usize);

    for it in 0..total {
        let mom = mass.draw(dim, &mut rng);
        let h0 = -logp + mass.kinetic(&mom);
        let u: f64 = rng.random();
        let accept = match leapfrog(target, &theta, &mom, &grad, config.step_size, config.n_leapfrog, &mass) {
            Ok(tr) => {
                let h1 = -tr.log_density + mass.kinetic(&tr.momentum);
                if h1.is_finite() && u.ln() < h0 - h1 {
                    theta = tr.theta;
                    logp = tr.log_density;
                    grad = tr.grad;
                    true
                } else {
                    if !h1.is_finite() && it >= burn {
                        divergences += 1;
                    }
                    false
                }
            }
            Err(Divergence) => {
                if it >= burn {
                    divergences += 1;
                }
                false
            }
        };
        if it >= burn {
            accepted += accept as usize;
            samples.row_mut(it - burn).copy_from_slice(&theta);
        }
    }

    let n = config.n_samples as f64;
    let acceptance_rate = accepted as f64 / n;
    let divergence_rate = divergences as f64 / n;
    let ess = (0..dim)
        .map(|j| effective_sample_size(samples.column(j).as_slice()))
        .collect();
    let mut warnings = Vec::new();
    let status = if acceptance_rate < 0.01 {
        warnings.push(format!("acceptance rate {acceptance_rate:.4} is below 1%"));
        ChainStatus::LowAcceptance
    } else {
        ChainStatus::Ok
    };
    if divergence_rate > 0.05 {
        warnings.push(format!(
            "{:.1}% of trajectories diverged; consider a smaller step size",
            100.0 * divergence_rate
        ));
    }
    for w in &warnings {
        warn!("hmc: {w}");
    }
    Ok(HmcOutput {
        samples,
        diagnostics: ChainDiagnostics {
            acceptance_rate,
            divergences,
            divergence_rate,
            ess,
            status,
            warnings,
            total_iterations: total,
            burn_in_iterations: burn,
        },
    })
}

/// Normal prior on loadings and Gamma(shape, rate) prior on noise variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub loading_mean: f64,
    pub loading_sd: f64,
    pub noise_shape: f64,
    pub noise_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            loading_mean: 0.0,
            loading_sd: 10.0,
            noise_shape: 0.1,
            noise_rate: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.loading_sd > 0.0 && self.noise_shape > 0.0 && self.noise_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("prior scales must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Log prior (up to a constant) and derivative in the parameter's
    /// transformed coordinate. Noise variances are sampled as `u = ln ω²`,
    /// so their density picks up the Jacobian `e^u`.
    pub fn log_density(&self, kind: ParamKind, value: f64) -> (f64, f64) {
        match kind {
            ParamKind::Noise { .. } => {
                let w = value.exp();
                (self.noise_shape * value - self.noise_rate * w, self.noise_shape - self.noise_rate * w)
            }
            _ => {
                let z = (value - self.loading_mean) / self.loading_sd;
                (-0.5 * z * z, -z / self.loading_sd)
            }
        }
    }
}

/// Whether HMC also samples the noise variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampledParams {
    #[default]
    Loadings,
    LoadingsAndNoise,
}

impl SampledParams {
    pub fn selection(self) -> ParamSelection {
        match self {
            SampledParams::Loadings => ParamSelection::Loadings,
            SampledParams::LoadingsAndNoise => ParamSelection::LoadingsAndNoise,
        }
    }
}

/// Conditional posterior of the loadings (and optionally log noises) given
/// the remaining hyperparameters.
///
/// Kernel hyperparameters are fixed, so the per-term Gram matrices over the
/// training inputs are computed once; each evaluation only rescales them by
/// the current coregionalization matrices.
#[derive(Debug, Clone)]
pub struct LoadingPosterior {
    pub structure: MogpStructure,
    pub blocks: Vec<Block>,
    pub y: DVector<f64>,
    pub params: Vec<ParamInfo>,
    pub prior: PriorSpec,
    /// Drop the likelihood and sample the prior alone.
    pub prior_only: bool,
    grams: Vec<DMatrix<f64>>,
    row_series: Vec<usize>,
}

impl LoadingPosterior {
    pub fn new(
        structure: MogpStructure,
        blocks: Vec<Block>,
        y: DVector<f64>,
        sampled: SampledParams,
        prior: PriorSpec,
    ) -> Result<Self> {
        prior.validate()?;
        structure.validate()?;
        let n: usize = blocks.iter().map(Block::len).sum();
        if n != y.len() {
            return Err(Error::DimensionMismatch(format!("{} observations for {n} inputs", y.len())));
        }
        let row_series: Vec<usize> = blocks.iter().flat_map(|b| std::iter::repeat_n(b.series, b.len())).collect();
        if let Some(&s) = row_series.iter().find(|&&s| s >= structure.m()) {
            return Err(Error::DimensionMismatch(format!("block for series {s} in a {}-output model", structure.m())));
        }
        let grams = structure
            .terms
            .iter()
            .map(|t| {
                let x = stack_inputs(&blocks, |b| t.slice.apply(&b.inputs));
                t.kernel.gram(&x, &x)
            })
            .collect::<Result<Vec<_>>>()?;
        let params = structure.parameters(sampled.selection());
        Ok(LoadingPosterior {
            structure,
            blocks,
            y,
            params,
            prior,
            prior_only: false,
            grams,
            row_series,
        })
    }

    pub fn from_fit(gp: &FittedGp, sampled: SampledParams, prior: PriorSpec) -> Result<Self> {
        Self::new(gp.structure.clone(), gp.blocks.clone(), gp.y.clone(), sampled, prior)
    }

    /// Current structure values, a natural chain start.
    pub fn initial(&self) -> Vec<f64> {
        self.structure.values(&self.params)
    }

    pub fn structure_at(&self, theta: &[f64]) -> MogpStructure {
        let mut s = self.structure.clone();
        s.set_values(&self.params, theta);
        s
    }

    fn log_likelihood(&self, s: &MogpStructure) -> Option<(f64, Vec<f64>)> {
        let n = self.y.len();
        let ser = &self.row_series;
        let bs: Vec<DMatrix<f64>> = s.terms.iter().map(|t| t.coregionalization.matrix()).collect();
        let mut sigma = DMatrix::from_fn(n, n, |r, c| {
            bs.iter().zip(&self.grams).map(|(b, g)| b[(ser[r], ser[c])] * g[(r, c)]).sum()
        });
        for r in 0..n {
            sigma[(r, r)] += s.noise[ser[r]];
        }
        let factor = factorize(&sigma).ok()?;
        let alpha = factor.solve(&self.y);
        let value = lml_from_factor(&self.y, &factor, &alpha);
        let mut w = &alpha * alpha.transpose();
        w -= factor.inverse();
        let m = s.m();
        // S_q[i, j] = Σ over block (i, j) of W ∘ G_q.
        let block_sums: Vec<DMatrix<f64>> = self
            .grams
            .iter()
            .map(|g| {
                let mut out = DMatrix::zeros(m, m);
                for c in 0..n {
                    for r in 0..n {
                        out[(ser[r], ser[c])] += w[(r, c)] * g[(r, c)];
                    }
                }
                out
            })
            .collect();
        let grad = self
            .params
            .iter()
            .map(|p| match p.kind {
                // ∂B/∂λ_s = e_s λ' + λ e_s', so ½ tr(W ∂Σ) = Σ_j S[s, j] λ_j.
                ParamKind::Loading { term, series } => {
                    let l = &s.terms[term].coregionalization.loadings;
                    (0..m).map(|j| block_sums[term][(series, j)] * l[j]).sum()
                }
                ParamKind::Noise { series } => {
                    0.5 * s.noise[series] * (0..n).filter(|&r| ser[r] == series).map(|r| w[(r, r)]).sum::<f64>()
                }
                _ => unreachable!("only loadings and noises are sampled"),
            })
            .collect();
        Some((value, grad))
    }
}

fn stack_inputs(blocks: &[Block], f: impl Fn(&Block) -> DMatrix<f64>) -> DMatrix<f64> {
    let parts: Vec<DMatrix<f64>> = blocks.iter().map(f).collect();
    let rows: usize = parts.iter().map(DMatrix::nrows).sum();
    let cols = parts.first().map_or(0, DMatrix::ncols);
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for p in parts {
        out.rows_mut(r0, p.nrows()).copy_from(&p);
        r0 += p.nrows();
    }
    out
}

impl LogDensity for LoadingPosterior {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn log_density(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let s = self.structure_at(theta);
        let floor = s.noise_floor;
        if floor > 0.0 && s.noise.iter().any(|&w| w < floor) {
            return None;
        }
        let (mut lp, mut grad) = if self.prior_only {
            (0.0, vec![0.0; theta.len()])
        } else {
            self.log_likelihood(&s)?
        };
        for ((p, v), g) in self.params.iter().zip(theta).zip(grad.iter_mut()) {
            let (l, d) = self.prior.log_density(p.kind, *v);
            lp += l;
            *g += d;
        }
        lp.is_finite().then_some((lp, grad))
    }
}

/// Writes draws as CSV preceded by `#`-prefixed JSON header lines.
pub fn write_samples(
    path: &Path,
    names: &[String],
    samples: &DMatrix<f64>,
    header: &serde_json::Value,
) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in serde_json::to_string_pretty(header)?.lines() {
        writeln!(f, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(f);
    w.write_record(names)?;
    for row in samples.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_samples`], returning column names and draws.
pub fn read_samples(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for (c, v) in rec.iter().enumerate() {
            values.push(v.parse::<f64>().map_err(|_| Error::NonNumeric {
                column: names.get(c).cloned().unwrap_or_default(),
                value: v.to_string(),
                line: rows as u64 + 2,
            })?);
        }
        rows += 1;
    }
    Ok((names.clone(), DMatrix::from_row_slice(rows, names.len(), &values)))
}

/// Pooled counterfactual trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSamples {
    /// `K x H` joint draws.
    pub paths: DMatrix<f64>,
    /// Hyperparameter draws skipped because the covariance failed to factor.
    pub skipped: usize,
}

/// For every hyperparameter draw (a row of `draws` over `params`), forms
/// the posterior predictive at `test` from the training data and draws
/// `n_pred` joint trajectories. With `observation_noise`, the paths are
/// for new observations rather than the latent function.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_posterior(
    structure: &MogpStructure,
    params: &[ParamInfo],
    draws: &DMatrix<f64>,
    blocks: &[Block],
    y: &DVector<f64>,
    test: &[Block],
    n_pred: usize,
    observation_noise: bool,
    seed: u64,
) -> Result<CounterfactualSamples> {
    if draws.ncols() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "draws have {} columns for {} parameters",
            draws.ncols(),
            params.len()
        )));
    }
    if n_pred == 0 || draws.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one draw and one path per draw".into()));
    }
    let h: usize = test.iter().map(Block::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pooled: Vec<DMatrix<f64>> = Vec::with_capacity(draws.nrows());
    let mut skipped = 0;
    for row in draws.row_iter() {
        let mut s = structure.clone();
        let theta: Vec<f64> = row.iter().copied().collect();
        s.set_values(params, &theta);
        let dist = FittedGp::new(s.clone(), blocks.to_vec(), y.clone()).and_then(|gp| gp.posterior_predictive(test));
        match dist {
            Ok(d) => {
                let d = if observation_noise { d.with_observation_noise(&s) } else { d };
                pooled.push(d.sample_with(n_pred, &mut rng));
            }
            Err(_) => skipped += 1,
        }
    }
    if pooled.is_empty() {
        return Err(Error::Factorization { jitter: f64::NAN });
    }
    let mut paths = DMatrix::zeros(pooled.len() * n_pred, h);
    for (k, block) in pooled.iter().enumerate() {
        paths.rows_mut(k * n_pred, n_pred).copy_from(block);
    }
    Ok(CounterfactualSamples { paths, skipped })
}
