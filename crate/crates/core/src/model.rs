//! Turns a panel into GP training data for one model fit.
//!
//! Controls enter with their full history. The treated series contributes
//! only its first `train_end` observations, and predictions are made at a
//! window of its later rows. Outcomes are standardized per series with the
//! mean and standard deviation of the observations used for training.
//!
//! The single-output variant has no controls as outputs; instead, each
//! treated row is joined with the (standardized) control outcomes observed
//! at the same time, which become extra input columns.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::HeterotopicDataset;
use crate::error::{Error, Result};
use crate::kernels::MaternNu;
use crate::mogp::{build_variant, median_pairwise_distance, Block, MogpStructure, Variant, VariantDefaults};
use crate::optimizer::TrainingData;
use crate::stats;

/// A named model configuration. Several specs may share a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub variant: Variant,
    /// Smoothness of the Matérn terms, where the variant has any.
    #[serde(default = "default_nu")]
    pub matern_nu: MaternNu,
}

fn default_nu() -> MaternNu {
    MaternNu::Half
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        ModelSpec {
            name: variant.tag().to_string(),
            variant,
            matern_nu: MaternNu::Half,
        }
    }
}

/// Treated rows used for training and for prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub train_end: usize,
    pub predict: Range<usize>,
}

impl Window {
    /// Train on the pre-intervention period, predict the post period.
    pub fn counterfactual(ds: &HeterotopicDataset) -> Self {
        let t = ds.treated();
        let t0 = t.t0.expect("treated series has t0");
        Window {
            train_end: t0,
            predict: t0..t.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn fit(y: &[f64]) -> Self {
        let mean = stats::mean(y);
        let sd = stats::std_dev(y);
        Standardization {
            mean,
            sd: if sd.is_finite() && sd > 0.0 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub variant: Variant,
    /// Output series, in block order.
    pub series_ids: Vec<String>,
    /// Output index of the treated series.
    pub treated: usize,
    pub train: TrainingData,
    /// Treated inputs at the prediction rows.
    pub test: Vec<Block>,
    pub test_times: Vec<f64>,
    /// Observed treated outcomes at the prediction rows, original scale.
    pub y_test: Vec<f64>,
    pub scales: Vec<Standardization>,
    /// Covariate count handed to [`build_variant`].
    pub n_covariates: usize,
    pub defaults: VariantDefaults,
}

/// Lays out training and prediction data for `variant`.
pub fn prepare(ds: &HeterotopicDataset, variant: Variant, window: &Window) -> Result<ModelData> {
    let ti = ds.treated_index();
    let treated = &ds.series[ti];
    if window.train_end == 0 || window.train_end > treated.len() || window.predict.end > treated.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} does not fit a treated series of length {}",
            treated.len()
        )));
    }
    if window.predict.is_empty() {
        return Err(Error::InvalidArgument("empty prediction window".into()));
    }
    let y_test = treated.y[window.predict.clone()].to_vec();
    let test_times = treated.times[window.predict.clone()].to_vec();

    let data = if variant == Variant::SingleOutput {
        single_output(ds, window)?
    } else {
        if ds.m() < 2 {
            return Err(Error::InvalidArgument(format!("{variant} needs at least one control series")));
        }
        let mut blocks = Vec::with_capacity(ds.m());
        let mut y = Vec::new();
        let mut scales = Vec::with_capacity(ds.m());
        let mut ids = Vec::with_capacity(ds.m());
        let mut test = Vec::new();
        for (i, s) in ds.series.iter().enumerate() {
            let rows = if i == ti { 0..window.train_end } else { 0..s.len() };
            let sc = Standardization::fit(&s.y[rows.clone()]);
            y.extend(s.y[rows.clone()].iter().map(|v| sc.apply(*v)));
            blocks.push(Block::new(i, s.inputs(rows)));
            scales.push(sc);
            ids.push(s.id.clone());
            if i == ti {
                test.push(Block::new(i, s.inputs(window.predict.clone())));
            }
        }
        Partial {
            series_ids: ids,
            treated: ti,
            blocks,
            y,
            test,
            scales,
            n_covariates: ds.n_covariates(),
        }
    };
    let defaults = defaults_from_blocks(&data.blocks, data.n_covariates);
    Ok(ModelData {
        variant,
        series_ids: data.series_ids,
        treated: data.treated,
        train: TrainingData {
            blocks: data.blocks,
            y: DVector::from_vec(data.y),
        },
        test: data.test,
        test_times,
        y_test,
        scales: data.scales,
        n_covariates: data.n_covariates,
        defaults,
    })
}

struct Partial {
    series_ids: Vec<String>,
    treated: usize,
    blocks: Vec<Block>,
    y: Vec<f64>,
    test: Vec<Block>,
    scales: Vec<Standardization>,
    n_covariates: usize,
}

fn single_output(ds: &HeterotopicDataset, window: &Window) -> Result<Partial> {
    let ti = ds.treated_index();
    let treated = &ds.series[ti];
    let controls: Vec<_> = ds.controls().collect();
    let control_scales: Vec<Standardization> = controls.iter().map(|c| Standardization::fit(&c.y)).collect();
    let d = ds.n_covariates();
    // Inputs: time, treated covariates, standardized control outcomes.
    let row = |r: usize| -> Option<Vec<f64>> {
        let t = treated.times[r];
        let mut v = vec![t];
        v.extend(treated.covariates.row(r).iter());
        for (c, sc) in controls.iter().zip(&control_scales) {
            let k = c.times.iter().position(|&ct| ct == t)?;
            v.push(sc.apply(c.y[k]));
        }
        Some(v)
    };
    let width = 1 + d + controls.len();
    let train_rows: Vec<usize> = (0..window.train_end).filter(|&r| row(r).is_some()).collect();
    if train_rows.is_empty() {
        return Err(Error::Data("no training row has every control observed".into()));
    }
    let mut test_rows = Vec::with_capacity(window.predict.len());
    for r in window.predict.clone() {
        test_rows.push(row(r).ok_or_else(|| {
            Error::Data(format!(
                "control outcomes missing at time {} for the single-output model",
                treated.times[r]
            ))
        })?);
    }
    let train_y: Vec<f64> = train_rows.iter().map(|&r| treated.y[r]).collect();
    let sc = Standardization::fit(&train_y);
    let to_matrix = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
    let train_inputs: Vec<Vec<f64>> = train_rows.iter().filter_map(|&r| row(r)).collect();
    Ok(Partial {
        series_ids: vec![treated.id.clone()],
        treated: 0,
        blocks: vec![Block::new(0, to_matrix(&train_inputs))],
        y: train_y.iter().map(|v| sc.apply(*v)).collect(),
        test: vec![Block::new(0, to_matrix(&test_rows))],
        scales: vec![sc],
        n_covariates: width - 1,
    })
}

fn defaults_from_blocks(blocks: &[Block], n_covariates: usize) -> VariantDefaults {
    let mut out = VariantDefaults::new(n_covariates);
    let column = |c: usize| -> Vec<f64> { blocks.iter().flat_map(|b| b.inputs.column(c).iter().copied().collect::<Vec<_>>()).collect() };
    out.time_lengthscale = median_pairwise_distance(&column(0));
    out.covariate_lengthscales = (1..=n_covariates).map(|c| median_pairwise_distance(&column(c))).collect();
    out
}

impl ModelData {
    /// Default structure for `spec` on this data.
    pub fn build(&self, spec: &ModelSpec, noise_floor: f64) -> Result<MogpStructure> {
        if spec.variant != self.variant {
            return Err(Error::InvalidArgument(format!(
                "data prepared for {}, model is {}",
                self.variant, spec.variant
            )));
        }
        let mut defaults = self.defaults.clone();
        defaults.matern_nu = spec.matern_nu;
        defaults.noise_floor = noise_floor;
        build_variant(spec.variant, self.series_ids.len(), self.n_covariates, &defaults)
    }

    pub fn treated_scale(&self) -> Standardization {
        self.scales[self.treated]
    }

    /// Maps standardized treated-series paths (rows) back to outcome units.
    pub fn paths_to_original(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let sc = self.treated_scale();
        z.map(|v| sc.invert(v))
    }
}
