//! Causal estimands from observed outcomes and counterfactual paths.
//!
//! Every aggregate is computed per sample path and then summarised, so the
//! reported bands reflect the joint structure of the counterfactual draws.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmc::SampledParams;
use crate::stats::{self, Summary};

/// Which sources of uncertainty the counterfactual paths carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintySources {
    /// GP function uncertainty at fixed hyperparameters.
    #[serde(rename = "function-only")]
    FunctionOnly,
    /// Also integrates over the loadings.
    #[serde(rename = "+lambda")]
    Loadings,
    /// Also integrates over loadings and noise variances.
    #[serde(rename = "+lambda,omega2")]
    LoadingsAndNoise,
}

impl From<SampledParams> for UncertaintySources {
    fn from(s: SampledParams) -> Self {
        match s {
            SampledParams::Loadings => UncertaintySources::Loadings,
            SampledParams::LoadingsAndNoise => UncertaintySources::LoadingsAndNoise,
        }
    }
}

impl UncertaintySources {
    pub fn tag(self) -> &'static str {
        match self {
            UncertaintySources::FunctionOnly => "function_only",
            UncertaintySources::Loadings => "lambda",
            UncertaintySources::LoadingsAndNoise => "lambda_noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseEffect {
    pub time: f64,
    /// Posterior mean of the effect.
    pub tau: f64,
    /// Posterior variance of the effect.
    pub variance: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiplicativeEffect {
    pub time: f64,
    /// Mean of `exp(δ)` over the samples.
    pub mean: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    /// `exp(τ + ϱ²/2)`, exact when δ is Gaussian.
    pub lognormal_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplicativeReport {
    pub pointwise: Vec<MultiplicativeEffect>,
    /// Summary of `exp(τ̄)` over the samples.
    pub average: Summary,
    pub average_lognormal_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalReport {
    pub level: f64,
    /// Number of pooled counterfactual paths.
    pub k: usize,
    pub horizon: usize,
    pub uncertainty_sources: UncertaintySources,
    pub pointwise: Vec<PointwiseEffect>,
    /// Running cumulative effect at each post-intervention time.
    pub cumulative_path: Vec<Summary>,
    pub cumulative: Summary,
    pub average: Summary,
    pub multiplicative: Option<MultiplicativeReport>,
}

/// `δ[k, t] = y_obs[t] − ỹ[k, t]`.
pub fn effect_samples(y_obs: &[f64], counterfactual: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if counterfactual.ncols() != y_obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations, counterfactual horizon {}",
            y_obs.len(),
            counterfactual.ncols()
        )));
    }
    if counterfactual.nrows() < 2 {
        return Err(Error::InvalidArgument("at least two counterfactual samples are required".into()));
    }
    Ok(DMatrix::from_fn(counterfactual.nrows(), y_obs.len(), |k, t| {
        y_obs[t] - counterfactual[(k, t)]
    }))
}

/// Per-time effect distributions.
pub fn pointwise_effects(
    times: &[f64],
    y_obs: &[f64],
    counterfactual: &DMatrix<f64>,
    level: f64,
) -> Result<(DMatrix<f64>, Vec<PointwiseEffect>)> {
    if times.len() != y_obs.len() {
        return Err(Error::DimensionMismatch(format!("{} times for {} observations", times.len(), y_obs.len())));
    }
    let delta = effect_samples(y_obs, counterfactual)?;
    let effects = times
        .iter()
        .enumerate()
        .map(|(t, &time)| {
            let s = Summary::of(delta.column(t).as_slice(), level);
            PointwiseEffect {
                time,
                tau: s.mean,
                variance: s.variance,
                lower: s.lower,
                median: s.median,
                upper: s.upper,
            }
        })
        .collect();
    Ok((delta, effects))
}

/// Per-sample cumulative effect `Σ_t δ[k, t]`.
pub fn cumulative_samples(delta: &DMatrix<f64>) -> Vec<f64> {
    delta.row_iter().map(|r| r.iter().sum()).collect()
}

pub fn cumulative_effect(delta: &DMatrix<f64>, level: f64) -> Summary {
    Summary::of(&cumulative_samples(delta), level)
}

/// Per-sample average effect `𝒯[k] / H`.
pub fn average_samples(cumulative: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("average effect needs a positive horizon".into()));
    }
    let h = horizon as f64;
    Ok(cumulative.iter().map(|c| c / h).collect())
}

pub fn average_effect(cumulative: &[f64], horizon: usize, level: f64) -> Result<Summary> {
    Ok(Summary::of(&average_samples(cumulative, horizon)?, level))
}

/// `exp(τ + ϱ²/2)`.
pub fn lognormal_mean(tau: f64, variance: f64) -> f64 {
    (tau + 0.5 * variance).exp()
}

/// Ratio-scale effects from log-scale effect samples.
pub fn multiplicative_effect(times: &[f64], delta: &DMatrix<f64>, level: f64) -> Vec<MultiplicativeEffect> {
    times
        .iter()
        .enumerate()
        .map(|(t, &time)| {
            let col = delta.column(t);
            let ratios: Vec<f64> = col.iter().map(|d| d.exp()).collect();
            let s = Summary::of(&ratios, level);
            MultiplicativeEffect {
                time,
                mean: s.mean,
                lower: s.lower,
                median: s.median,
                upper: s.upper,
                lognormal_mean: lognormal_mean(stats::mean(col.as_slice()), stats::variance(col.as_slice())),
            }
        })
        .collect()
}

impl CausalReport {
    /// Computes every estimand from observed post-intervention outcomes and
    /// a `K x H` matrix of counterfactual paths.
    pub fn compute(
        times: &[f64],
        y_obs: &[f64],
        counterfactual: &DMatrix<f64>,
        level: f64,
        log_scale: bool,
        sources: UncertaintySources,
    ) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidArgument(format!("credible level {level} not in (0, 1)")));
        }
        let (delta, pointwise) = pointwise_effects(times, y_obs, counterfactual, level)?;
        let horizon = y_obs.len();
        let mut running = DMatrix::zeros(delta.nrows(), horizon);
        for k in 0..delta.nrows() {
            let mut acc = 0.0;
            for t in 0..horizon {
                acc += delta[(k, t)];
                running[(k, t)] = acc;
            }
        }
        let cumulative_path = (0..horizon)
            .map(|t| Summary::of(running.column(t).as_slice(), level))
            .collect();
        let cum = cumulative_samples(&delta);
        let avg = average_samples(&cum, horizon)?;
        let multiplicative = log_scale.then(|| {
            let ratios: Vec<f64> = avg.iter().map(|a| a.exp()).collect();
            MultiplicativeReport {
                pointwise: multiplicative_effect(times, &delta, level),
                average: Summary::of(&ratios, level),
                average_lognormal_mean: lognormal_mean(stats::mean(&avg), stats::variance(&avg)),
            }
        });
        Ok(CausalReport {
            level,
            k: delta.nrows(),
            horizon,
            uncertainty_sources: sources,
            pointwise,
            cumulative_path,
            cumulative: Summary::of(&cum, level),
            average: Summary::of(&avg, level),
            multiplicative,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Pointwise bands: `time,tau,variance,lower,median,upper`.
    pub fn write_pointwise_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "tau", "variance", "lower", "median", "upper"])?;
        for p in &self.pointwise {
            w.write_record(
                [p.time, p.tau, p.variance, p.lower, p.median, p.upper].map(|v| v.to_string()),
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Running cumulative effect: `time,mean,lower,median,upper`.
    pub fn write_cumulative_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "mean", "lower", "median", "upper"])?;
        for (p, s) in self.pointwise.iter().zip(&self.cumulative_path) {
            w.write_record([p.time, s.mean, s.lower, s.median, s.upper].map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Ratio-scale bands, when present:
    /// `time,mean,lower,median,upper,lognormal_mean`.
    pub fn write_multiplicative_csv(&self, path: &Path) -> Result<bool> {
        let Some(m) = &self.multiplicative else {
            return Ok(false);
        };
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "mean", "lower", "median", "upper", "lognormal_mean"])?;
        for p in &m.pointwise {
            w.write_record([p.time, p.mean, p.lower, p.median, p.upper, p.lognormal_mean].map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_listed_samples() {
        let cf = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let (_, p) = pointwise_effects(&[1.0], &[3.0], &cf, 0.95).unwrap();
        assert!((p[0].tau - 0.5).abs() < 1e-15);
        assert!((p[0].variance - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_worlds_have_no_effect() {
        let y = [1.0, 2.0, 3.0];
        let cf = DMatrix::from_fn(5, 3, |_, t| y[t]);
        let r = CausalReport::compute(&[1.0, 2.0, 3.0], &y, &cf, 0.95, false, UncertaintySources::FunctionOnly).unwrap();
        assert!(r.pointwise.iter().all(|p| p.tau == 0.0 && p.variance == 0.0));
        assert_eq!(r.cumulative.mean, 0.0);
        assert!(r.multiplicative.is_none());
    }

    #[test]
    fn constant_effect_sums_exactly() {
        let cf = DMatrix::from_element(7, 10, 2.0);
        let y = vec![3.0; 10];
        let delta = effect_samples(&y, &cf).unwrap();
        assert!(cumulative_samples(&delta).iter().all(|&c| c == 10.0));
        let avg = average_samples(&cumulative_samples(&delta), 10).unwrap();
        assert!(avg.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn errors() {
        let cf = DMatrix::from_element(3, 2, 0.0);
        assert!(effect_samples(&[1.0], &cf).is_err());
        assert!(effect_samples(&[1.0, 2.0], &DMatrix::from_element(1, 2, 0.0)).is_err());
        assert!(average_samples(&[1.0], 0).is_err());
    }

    #[test]
    fn lognormal_baselines() {
        assert_eq!(lognormal_mean(0.0, 0.0), 1.0);
        assert!((lognormal_mean(2f64.ln(), 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn serde_tags_for_sources() {
        let s = serde_json::to_string(&UncertaintySources::LoadingsAndNoise).unwrap();
        assert_eq!(s, "\"+lambda,omega2\"");
    }
}
