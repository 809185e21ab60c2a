//! Linear model of coregionalization over heterotopic panels.
//!
//! The multi-output covariance is a sum of `Q` latent terms. Term `q` pairs
//! a coregionalization matrix `B_q = λ_q λ_q' + diag(k_q)` with a kernel
//! evaluated on one slice of the inputs (time, covariates, or both). Because
//! every series has its own length, the covariance is assembled block-wise:
//! block `(i, j)` is `Σ_q B_q[i, j] · K_q(X_i, X_j)`.
//!
//! Hyperparameters are addressed through [`ParamKind`]. The optimizer and
//! the sampler see them through [`ParamInfo`] in transformed coordinates:
//! loadings stay on the real line, every other hyperparameter is handled on
//! the log scale.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::HeterotopicDataset;
use crate::error::{Error, Result};
use crate::kernels::{Kernel, MaternNu};

/// Log-scale box applied to every positive hyperparameter.
pub const LOG_PARAM_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, 13.815_510_557_964_274);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "2FGP")]
    TwoFactor,
    #[serde(rename = "1FGP")]
    OneFactor,
    #[serde(rename = "2RBF")]
    TwoRbf,
    #[serde(rename = "INGP")]
    Independent,
    #[serde(rename = "SOGP")]
    SingleOutput,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TwoFactor,
        Variant::OneFactor,
        Variant::TwoRbf,
        Variant::Independent,
        Variant::SingleOutput,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::TwoFactor => "2FGP",
            Variant::OneFactor => "1FGP",
            Variant::TwoRbf => "2RBF",
            Variant::Independent => "INGP",
            Variant::SingleOutput => "SOGP",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Which columns of a series' input rows a latent term reads. Input rows are
/// `[time, covariates...]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSlice {
    Time,
    Covariates,
    All,
}

impl InputSlice {
    pub fn width(self, n_covariates: usize) -> usize {
        match self {
            InputSlice::Time => 1,
            InputSlice::Covariates => n_covariates,
            InputSlice::All => 1 + n_covariates,
        }
    }

    pub fn apply(self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            InputSlice::Time => inputs.columns(0, 1).into_owned(),
            InputSlice::Covariates => inputs.columns(1, inputs.ncols() - 1).into_owned(),
            InputSlice::All => inputs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coregionalization {
    pub loadings: Vec<f64>,
    pub nuggets: Vec<f64>,
}

impl Coregionalization {
    pub fn new(loadings: Vec<f64>, nuggets: Vec<f64>) -> Result<Self> {
        if loadings.len() != nuggets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} loadings but {} nuggets",
                loadings.len(),
                nuggets.len()
            )));
        }
        if nuggets.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidHyperparameter(
                "coregionalization nuggets must be positive".into(),
            ));
        }
        Ok(Coregionalization { loadings, nuggets })
    }

    pub fn identity(m: usize) -> Self {
        Coregionalization {
            loadings: vec![0.0; m],
            nuggets: vec![1.0; m],
        }
    }

    pub fn m(&self) -> usize {
        self.loadings.len()
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let b = self.loadings[i] * self.loadings[j];
        if i == j {
            b + self.nuggets[i]
        } else {
            b
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.m();
        DMatrix::from_fn(m, m, |i, j| self.entry(i, j))
    }
}

/// Which groups of a term are held at their current values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFreeze {
    #[serde(default)]
    pub loadings: bool,
    #[serde(default)]
    pub nuggets: bool,
    #[serde(default)]
    pub kernel: bool,
    /// Hold the kernel's leading variance fixed so that the coregionalization
    /// matrix alone carries the term's scale. Without this the likelihood is
    /// flat along `λ → cλ, k → c²k, σ² → σ²/c²`.
    #[serde(default)]
    pub kernel_scale: bool,
}

impl TermFreeze {
    pub fn all() -> Self {
        TermFreeze {
            loadings: true,
            nuggets: true,
            kernel: true,
            kernel_scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTerm {
    pub coregionalization: Coregionalization,
    pub kernel: Kernel,
    pub slice: InputSlice,
    #[serde(default)]
    pub freeze: TermFreeze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogpStructure {
    pub variant: Variant,
    pub terms: Vec<LatentTerm>,
    /// Observation noise variance per series.
    pub noise: Vec<f64>,
    #[serde(default)]
    pub freeze_noise: bool,
    /// Lower bound on every noise variance during optimization.
    #[serde(default)]
    pub noise_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "snake_case")]
pub enum ParamKind {
    Loading { term: usize, series: usize },
    Nugget { term: usize, series: usize },
    Kernel { term: usize, index: usize },
    Noise { series: usize },
}

impl ParamKind {
    /// Loadings live on the real line; all other hyperparameters are
    /// positive and handled in log space.
    pub fn log_scale(self) -> bool {
        !matches!(self, ParamKind::Loading { .. })
    }
}

/// A hyperparameter as seen by an optimizer or sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub kind: ParamKind,
    pub name: String,
    /// Bounds in transformed coordinates.
    pub lower: f64,
    pub upper: f64,
}

/// Selects hyperparameters to expose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelection {
    /// Everything not frozen by the structure.
    Free,
    /// All loadings of non-frozen terms.
    Loadings,
    /// Loadings of non-frozen terms and the noise variances.
    LoadingsAndNoise,
}

/// Starting values used by [`build_variant`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantDefaults {
    pub loading: f64,
    pub nugget: f64,
    pub signal_variance: f64,
    pub noise: f64,
    /// Lengthscale for the time input.
    pub time_lengthscale: f64,
    /// One lengthscale per covariate.
    pub covariate_lengthscales: Vec<f64>,
    pub matern_nu: MaternNu,
    pub noise_floor: f64,
}

impl VariantDefaults {
    pub fn new(n_covariates: usize) -> Self {
        VariantDefaults {
            loading: 1.0,
            nugget: 0.5,
            signal_variance: 1.0,
            noise: 0.1,
            time_lengthscale: 1.0,
            covariate_lengthscales: vec![1.0; n_covariates],
            matern_nu: MaternNu::Half,
            noise_floor: 0.0,
        }
    }

    /// Lengthscales set to the median pairwise distance of each input
    /// column over the pooled panel.
    pub fn from_data(ds: &HeterotopicDataset) -> Self {
        let d = ds.n_covariates();
        let mut out = VariantDefaults::new(d);
        let column = |c: usize| -> Vec<f64> {
            ds.series
                .iter()
                .flat_map(|s| {
                    (0..s.len()).map(move |r| if c == 0 { s.times[r] } else { s.covariates[(r, c - 1)] })
                })
                .collect()
        };
        out.time_lengthscale = median_pairwise_distance(&column(0));
        out.covariate_lengthscales = (1..=d).map(|c| median_pairwise_distance(&column(c))).collect();
        out
    }

    fn isotropic_lengthscale(&self, slice: InputSlice) -> f64 {
        match slice {
            InputSlice::Time => self.time_lengthscale,
            InputSlice::Covariates => norm(&self.covariate_lengthscales),
            InputSlice::All => {
                let mut all = vec![self.time_lengthscale];
                all.extend_from_slice(&self.covariate_lengthscales);
                norm(&all)
            }
        }
    }

    fn ard_lengthscales(&self, slice: InputSlice) -> Vec<f64> {
        match slice {
            InputSlice::Time => vec![self.time_lengthscale],
            InputSlice::Covariates => self.covariate_lengthscales.clone(),
            InputSlice::All => {
                let mut all = vec![self.time_lengthscale];
                all.extend_from_slice(&self.covariate_lengthscales);
                all
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        n
    } else {
        1.0
    }
}

/// Median absolute difference over all pairs; 1 when undefined or zero.
pub fn median_pairwise_distance(values: &[f64]) -> f64 {
    let mut d = Vec::with_capacity(values.len() * values.len().saturating_sub(1) / 2);
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            d.push((values[i] - values[j]).abs());
        }
    }
    let med = crate::stats::median(&d);
    if med.is_finite() && med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Builds one of the model variants with default hyperparameters.
///
/// `m` is the number of outputs and `d` the number of covariates (time
/// excluded). For `SingleOutput` the caller passes the width of the combined
/// input (controls and covariates) as `d`.
pub fn build_variant(variant: Variant, m: usize, d: usize, defaults: &VariantDefaults) -> Result<MogpStructure> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one output".into()));
    }
    if variant == Variant::SingleOutput && m != 1 {
        return Err(Error::InvalidArgument(format!(
            "single-output GP takes exactly one output, got {m}"
        )));
    }
    if defaults.covariate_lengthscales.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "{} default covariate lengthscales for {d} covariates",
            defaults.covariate_lengthscales.len()
        )));
    }
    let needs_covariates = matches!(
        variant,
        Variant::TwoFactor | Variant::TwoRbf | Variant::Independent
    );
    if needs_covariates && d == 0 {
        return Err(Error::InvalidArgument(format!(
            "{variant} needs at least one covariate"
        )));
    }
    let coreg = || Coregionalization {
        loadings: vec![defaults.loading; m],
        nuggets: vec![defaults.nugget; m],
    };
    let var = defaults.signal_variance;
    let dims = |slice: InputSlice| (0..slice.width(d)).collect::<Vec<_>>();
    let rbf_ard = |slice: InputSlice| Kernel::rbf_ard(var, defaults.ard_lengthscales(slice), dims(slice));
    let matern = |slice: InputSlice| {
        Kernel::matern(defaults.matern_nu, var, defaults.isotropic_lengthscale(slice), dims(slice))
    };
    let term = |coregionalization, kernel, slice| LatentTerm {
        coregionalization,
        kernel,
        slice,
        freeze: TermFreeze {
            kernel_scale: true,
            ..TermFreeze::default()
        },
    };
    let two_terms = |time_kernel: Kernel| {
        vec![
            term(coreg(), rbf_ard(InputSlice::Covariates), InputSlice::Covariates),
            term(coreg(), time_kernel, InputSlice::Time),
        ]
    };
    let terms = match variant {
        Variant::TwoFactor => two_terms(matern(InputSlice::Time)),
        Variant::TwoRbf => two_terms(Kernel::rbf_ard(var, vec![defaults.time_lengthscale], vec![0])),
        Variant::OneFactor => vec![term(
            coreg(),
            Kernel::sum(vec![rbf_ard(InputSlice::All), matern(InputSlice::All)]),
            InputSlice::All,
        )],
        Variant::Independent => {
            let frozen = |kernel, slice| LatentTerm {
                coregionalization: Coregionalization::identity(m),
                kernel,
                slice,
                freeze: TermFreeze {
                    loadings: true,
                    nuggets: true,
                    kernel: false,
                    kernel_scale: false,
                },
            };
            vec![
                frozen(rbf_ard(InputSlice::Covariates), InputSlice::Covariates),
                frozen(matern(InputSlice::Time), InputSlice::Time),
            ]
        }
        Variant::SingleOutput => vec![LatentTerm {
            coregionalization: Coregionalization::identity(1),
            kernel: Kernel::rbf_iso(var, defaults.isotropic_lengthscale(InputSlice::All), dims(InputSlice::All)),
            slice: InputSlice::All,
            freeze: TermFreeze {
                loadings: true,
                nuggets: true,
                kernel: false,
                kernel_scale: false,
            },
        }],
    };
    let s = MogpStructure {
        variant,
        terms,
        noise: vec![defaults.noise.max(defaults.noise_floor); m],
        freeze_noise: false,
        noise_floor: defaults.noise_floor,
    };
    s.validate()?;
    Ok(s)
}

impl MogpStructure {
    pub fn m(&self) -> usize {
        self.noise.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.terms.is_empty() {
            return Err(Error::InvalidArgument("structure has no latent terms".into()));
        }
        for t in &self.terms {
            if t.coregionalization.m() != m {
                return Err(Error::DimensionMismatch(format!(
                    "coregionalization over {} outputs, structure has {m}",
                    t.coregionalization.m()
                )));
            }
            if t.coregionalization.nuggets.iter().any(|k| !(*k > 0.0)) {
                return Err(Error::InvalidHyperparameter("nuggets must be positive".into()));
            }
            t.kernel.validate()?;
        }
        if self.noise.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidHyperparameter("noise variances must be >= 0".into()));
        }
        Ok(())
    }

    /// Checks that every term can read its slice of `[time, d covariates]`.
    pub fn check_inputs(&self, n_covariates: usize) -> Result<()> {
        for (q, t) in self.terms.iter().enumerate() {
            let width = t.slice.width(n_covariates);
            if t.kernel.required_columns() > width {
                return Err(Error::DimensionMismatch(format!(
                    "term {q} reads {} columns of a {:?} slice with {width} columns",
                    t.kernel.required_columns(),
                    t.slice
                )));
            }
        }
        Ok(())
    }

    pub fn set_loadings(&mut self, term: usize, loadings: &[f64]) {
        self.terms[term].coregionalization.loadings.copy_from_slice(loadings);
    }

    pub fn get(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Loading { term, series } => self.terms[term].coregionalization.loadings[series],
            ParamKind::Nugget { term, series } => self.terms[term].coregionalization.nuggets[series],
            ParamKind::Kernel { term, index } => self.terms[term].kernel.params()[index],
            ParamKind::Noise { series } => self.noise[series],
        }
    }

    pub fn set(&mut self, kind: ParamKind, value: f64) {
        match kind {
            ParamKind::Loading { term, series } => {
                self.terms[term].coregionalization.loadings[series] = value
            }
            ParamKind::Nugget { term, series } => {
                self.terms[term].coregionalization.nuggets[series] = value
            }
            ParamKind::Kernel { term, index } => {
                let k = &mut self.terms[term].kernel;
                let mut p = k.params();
                p[index] = value;
                k.set_params(&p).expect("same length");
            }
            ParamKind::Noise { series } => self.noise[series] = value,
        }
    }

    fn name(&self, kind: ParamKind) -> String {
        match kind {
            ParamKind::Loading { term, series } => format!("term{term}.loading[{series}]"),
            ParamKind::Nugget { term, series } => format!("term{term}.nugget[{series}]"),
            ParamKind::Kernel { term, index } => {
                format!("term{term}.{}", self.terms[term].kernel.param_names()[index])
            }
            ParamKind::Noise { series } => format!("noise[{series}]"),
        }
    }

    /// Hyperparameters exposed under `selection`, in a fixed order: per term
    /// loadings, nuggets, kernel; then noises.
    pub fn parameters(&self, selection: ParamSelection) -> Vec<ParamInfo> {
        let m = self.m();
        let mut kinds = Vec::new();
        for (q, t) in self.terms.iter().enumerate() {
            if !t.freeze.loadings {
                kinds.extend((0..m).map(|i| ParamKind::Loading { term: q, series: i }));
            }
            if selection == ParamSelection::Free {
                if !t.freeze.nuggets {
                    kinds.extend((0..m).map(|i| ParamKind::Nugget { term: q, series: i }));
                }
                if !t.freeze.kernel {
                    let first = usize::from(t.freeze.kernel_scale);
                    kinds.extend((first..t.kernel.n_params()).map(|j| ParamKind::Kernel { term: q, index: j }));
                }
            }
        }
        let noise = match selection {
            ParamSelection::Free => !self.freeze_noise,
            ParamSelection::Loadings => false,
            ParamSelection::LoadingsAndNoise => true,
        };
        if noise {
            kinds.extend((0..m).map(|i| ParamKind::Noise { series: i }));
        }
        kinds
            .into_iter()
            .map(|kind| {
                let (lower, upper) = match kind {
                    // Sign identifiability: λ → -λ leaves B unchanged.
                    ParamKind::Loading { series: 0, .. } if selection == ParamSelection::Free => {
                        (0.0, f64::INFINITY)
                    }
                    ParamKind::Loading { .. } => (f64::NEG_INFINITY, f64::INFINITY),
                    ParamKind::Noise { .. } if self.noise_floor > 0.0 => {
                        (self.noise_floor.ln().max(LOG_PARAM_BOUNDS.0), LOG_PARAM_BOUNDS.1)
                    }
                    _ => LOG_PARAM_BOUNDS,
                };
                ParamInfo {
                    kind,
                    name: self.name(kind),
                    lower,
                    upper,
                }
            })
            .collect()
    }

    /// Free hyperparameters under the variant's freezing rules.
    pub fn count_parameters(&self) -> usize {
        self.parameters(ParamSelection::Free).len()
    }

    /// Current values in transformed coordinates.
    pub fn values(&self, params: &[ParamInfo]) -> Vec<f64> {
        params
            .iter()
            .map(|p| {
                let v = self.get(p.kind);
                if p.kind.log_scale() {
                    v.ln()
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn set_values(&mut self, params: &[ParamInfo], values: &[f64]) {
        for (p, &v) in params.iter().zip(values) {
            self.set(p.kind, if p.kind.log_scale() { v.exp() } else { v });
        }
    }

    /// Noise-free multi-output covariance between two lists of blocks.
    pub fn covariance(&self, a: &[Block], b: &[Block]) -> Result<DMatrix<f64>> {
        let (ra, rb) = (offsets(a), offsets(b));
        let mut out = DMatrix::zeros(ra[a.len()], rb[b.len()]);
        for term in &self.terms {
            let sa: Vec<DMatrix<f64>> = a.iter().map(|blk| term.slice.apply(&blk.inputs)).collect();
            let sb: Vec<DMatrix<f64>> = b.iter().map(|blk| term.slice.apply(&blk.inputs)).collect();
            for (i, bi) in a.iter().enumerate() {
                for (j, bj) in b.iter().enumerate() {
                    let scale = term.coregionalization.entry(bi.series, bj.series);
                    if scale == 0.0 {
                        continue;
                    }
                    let g = term.kernel.gram(&sa[i], &sb[j])?;
                    let mut view = out.view_mut((ra[i], rb[j]), (g.nrows(), g.ncols()));
                    view += g * scale;
                }
            }
        }
        Ok(out)
    }

    /// Diagonal of the observation-noise matrix for the given blocks.
    pub fn noise_diagonal(&self, blocks: &[Block]) -> DVector<f64> {
        DVector::from_iterator(
            blocks.iter().map(|b| b.len()).sum(),
            blocks
                .iter()
                .flat_map(|b| std::iter::repeat_n(self.noise[b.series], b.len())),
        )
    }

    /// `K + Ω` over the training blocks.
    pub fn noisy_covariance(&self, blocks: &[Block]) -> Result<DMatrix<f64>> {
        let mut k = self.covariance(blocks, blocks)?;
        let noise = self.noise_diagonal(blocks);
        for (i, w) in noise.iter().enumerate() {
            k[(i, i)] += w;
        }
        Ok(k)
    }

    /// `∂(K + Ω)/∂θ` for every entry of `params`, in the transformed
    /// coordinates of [`ParamInfo`].
    pub fn covariance_derivatives(&self, blocks: &[Block], params: &[ParamInfo]) -> Result<Vec<DMatrix<f64>>> {
        let offs = offsets(blocks);
        let n = offs[blocks.len()];
        let nb = blocks.len();
        let mut out: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); params.len()];

        for (q, term) in self.terms.iter().enumerate() {
            let wanted: Vec<(usize, ParamKind)> = params
                .iter()
                .enumerate()
                .filter(|(_, p)| match p.kind {
                    ParamKind::Loading { term, .. }
                    | ParamKind::Nugget { term, .. }
                    | ParamKind::Kernel { term, .. } => term == q,
                    ParamKind::Noise { .. } => false,
                })
                .map(|(i, p)| (i, p.kind))
                .collect();
            if wanted.is_empty() {
                continue;
            }
            let need_kernel_grads = wanted.iter().any(|(_, k)| matches!(k, ParamKind::Kernel { .. }));
            let kernel_params = term.kernel.params();
            let sliced: Vec<DMatrix<f64>> = blocks.iter().map(|b| term.slice.apply(&b.inputs)).collect();
            let coreg = &term.coregionalization;
            for i in 0..nb {
                for j in 0..nb {
                    let (si, sj) = (blocks[i].series, blocks[j].series);
                    let (gram, grads) = if need_kernel_grads {
                        term.kernel.gram_with_grads(&sliced[i], &sliced[j])?
                    } else {
                        (term.kernel.gram(&sliced[i], &sliced[j])?, Vec::new())
                    };
                    let origin = (offs[i], offs[j]);
                    let shape = (gram.nrows(), gram.ncols());
                    for &(slot, kind) in &wanted {
                        let factor = match kind {
                            // ∂B/∂λ_s = e_s λ' + λ e_s'
                            ParamKind::Loading { series, .. } => {
                                let mut f = 0.0;
                                if si == series {
                                    f += coreg.loadings[sj];
                                }
                                if sj == series {
                                    f += coreg.loadings[si];
                                }
                                f
                            }
                            // ∂B/∂log k_s = k_s e_s e_s'
                            ParamKind::Nugget { series, .. } => {
                                if si == series && sj == series {
                                    coreg.nuggets[series]
                                } else {
                                    0.0
                                }
                            }
                            ParamKind::Kernel { index, .. } => {
                                let scale = coreg.entry(si, sj) * kernel_params[index];
                                if scale != 0.0 {
                                    let mut view = out[slot].view_mut(origin, shape);
                                    view += &grads[index] * scale;
                                }
                                continue;
                            }
                            ParamKind::Noise { .. } => unreachable!(),
                        };
                        if factor != 0.0 {
                            let mut view = out[slot].view_mut(origin, shape);
                            view += &gram * factor;
                        }
                    }
                }
            }
        }

        for (slot, p) in params.iter().enumerate() {
            if let ParamKind::Noise { series } = p.kind {
                let w = self.noise[series];
                for (i, b) in blocks.iter().enumerate() {
                    if b.series == series {
                        for r in offs[i]..offs[i + 1] {
                            out[slot][(r, r)] = w;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rows of one series fed to the covariance: `inputs` is `n x (1 + d)`
/// with the time column first.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub series: usize,
    pub inputs: DMatrix<f64>,
}

impl Block {
    pub fn new(series: usize, inputs: DMatrix<f64>) -> Self {
        Block { series, inputs }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

fn offsets(blocks: &[Block]) -> Vec<usize> {
    let mut o = Vec::with_capacity(blocks.len() + 1);
    o.push(0);
    for b in blocks {
        o.push(o.last().unwrap() + b.len());
    }
    o
}

/// Full-series blocks for every series of a dataset, in dataset order.
pub fn dataset_blocks(ds: &HeterotopicDataset) -> Vec<Block> {
    ds.series
        .iter()
        .enumerate()
        .map(|(i, s)| Block::new(i, s.all_inputs()))
        .collect()
}

/// Noise-free covariance `K(X, X)` over the full panel.
pub fn assemble_covariance(structure: &MogpStructure, ds: &HeterotopicDataset) -> Result<DMatrix<f64>> {
    if structure.m() != ds.m() {
        return Err(Error::DimensionMismatch(format!(
            "structure has {} outputs, dataset {}",
            structure.m(),
            ds.m()
        )));
    }
    structure.check_inputs(ds.n_covariates())?;
    let blocks = dataset_blocks(ds);
    structure.covariance(&blocks, &blocks)
}
