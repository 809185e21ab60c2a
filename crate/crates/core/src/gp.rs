//! Exact Gaussian process inference.
//!
//! All solves go through one Cholesky factor of `Σ = K + Ω`. The matrix is
//! factorized as given first; if that fails, a jitter starting at
//! `1e-8 · mean(diag Σ)` is added and escalated tenfold up to
//! `1e-2 · mean(diag Σ)` before giving up.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mogp::{Block, MogpStructure, ParamInfo};
use crate::stats::{LN_2PI, Z_975};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;
const VARIANCE_CLAMP: f64 = 1e-10;

/// Cholesky factor of a covariance together with the jitter it needed.
#[derive(Clone, Debug)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is nonzero")
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factorizes a symmetric positive definite matrix, escalating jitter on
/// failure.
pub fn factorize(sigma: &DMatrix<f64>) -> Result<Factor> {
    let n = sigma.nrows();
    if n != sigma.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{}",
            n,
            sigma.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty covariance".into()));
    }
    let mean_diag = sigma.trace() / n as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::Factorization { jitter: 0.0 });
    }
    if let Some(chol) = Cholesky::new(sigma.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let mut jitter = JITTER_START * mean_diag;
    loop {
        let mut m = sigma.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
        if jitter >= JITTER_MAX * mean_diag * (1.0 - 1e-12) {
            return Err(Error::Factorization { jitter });
        }
        jitter = (jitter * 10.0).min(JITTER_MAX * mean_diag);
    }
}

fn check_len(y: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<()> {
    if y.len() != sigma.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for a {}x{} covariance",
            y.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn lml_from_factor(y: &DVector<f64>, factor: &Factor, alpha: &DVector<f64>) -> f64 {
    -0.5 * y.dot(alpha) - 0.5 * factor.log_det() - 0.5 * y.len() as f64 * LN_2PI
}

/// `-½ y'Σ⁻¹y - ½ log|Σ| - (T/2) log 2π`
pub fn log_marginal_likelihood(y: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    check_len(y, sigma)?;
    let factor = factorize(sigma)?;
    let alpha = factor.solve(y);
    Ok(lml_from_factor(y, &factor, &alpha))
}

/// `½ tr((αα' - Σ⁻¹) ∂Σ/∂θ)` for each derivative matrix.
fn gradient_from(factor: &Factor, alpha: &DVector<f64>, derivs: &[DMatrix<f64>]) -> Vec<f64> {
    let mut w = alpha * alpha.transpose();
    w -= factor.inverse();
    derivs.iter().map(|d| 0.5 * w.component_mul(d).sum()).collect()
}

/// Gradient of the log marginal likelihood with respect to `params`, in
/// their transformed coordinates (log scale for positive hyperparameters).
pub fn lml_gradient(
    y: &DVector<f64>,
    sigma: &DMatrix<f64>,
    structure: &MogpStructure,
    blocks: &[Block],
    params: &[ParamInfo],
) -> Result<Vec<f64>> {
    check_len(y, sigma)?;
    let factor = factorize(sigma)?;
    let alpha = factor.solve(y);
    let derivs = structure.covariance_derivatives(blocks, params)?;
    Ok(gradient_from(&factor, &alpha, &derivs))
}

/// Log marginal likelihood and its gradient for a structure over blocks.
pub fn lml_and_gradient(
    structure: &MogpStructure,
    blocks: &[Block],
    y: &DVector<f64>,
    params: &[ParamInfo],
) -> Result<(f64, Vec<f64>)> {
    let sigma = structure.noisy_covariance(blocks)?;
    check_len(y, &sigma)?;
    let factor = factorize(&sigma)?;
    let alpha = factor.solve(y);
    let value = lml_from_factor(y, &factor, &alpha);
    if params.is_empty() {
        return Ok((value, Vec::new()));
    }
    let derivs = structure.covariance_derivatives(blocks, params)?;
    Ok((value, gradient_from(&factor, &alpha, &derivs)))
}

/// A GP conditioned on training data with fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct FittedGp {
    pub structure: MogpStructure,
    pub blocks: Vec<Block>,
    pub y: DVector<f64>,
    pub sigma: DMatrix<f64>,
    factor: Factor,
    pub alpha: DVector<f64>,
    pub log_ml: f64,
}

impl FittedGp {
    pub fn new(structure: MogpStructure, blocks: Vec<Block>, y: DVector<f64>) -> Result<Self> {
        structure.validate()?;
        let sigma = structure.noisy_covariance(&blocks)?;
        check_len(&y, &sigma)?;
        let factor = factorize(&sigma)?;
        let alpha = factor.solve(&y);
        let log_ml = lml_from_factor(&y, &factor, &alpha);
        Ok(FittedGp {
            structure,
            blocks,
            y,
            sigma,
            factor,
            alpha,
            log_ml,
        })
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    /// Predictive distribution of the latent function at `test` inputs.
    pub fn posterior_predictive(&self, test: &[Block]) -> Result<PredictiveDistribution> {
        let k_xs = self.structure.covariance(&self.blocks, test)?;
        let k_ss = self.structure.covariance(test, test)?;
        let mean = k_xs.transpose() * &self.alpha;
        let v = self.factor.solve_lower(&k_xs);
        let mut cov = k_ss - v.transpose() * v;
        symmetrize(&mut cov);
        let scale = (0..cov.nrows()).fold(1.0f64, |acc, i| acc.max(cov[(i, i)].abs()));
        for i in 0..cov.nrows() {
            let d = cov[(i, i)];
            if d < 0.0 {
                if d < -VARIANCE_CLAMP * scale {
                    return Err(Error::NegativeVariance(d));
                }
                cov[(i, i)] = 0.0;
            }
        }
        let labels = test
            .iter()
            .flat_map(|b| (0..b.len()).map(move |r| (b.series, b.inputs[(r, 0)])))
            .collect();
        Ok(PredictiveDistribution { mean, cov, labels })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Joint Gaussian over a set of test points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `(series, time)` of every test point.
    pub labels: Vec<(usize, f64)>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn sd(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|i| self.cov[(i, i)].max(0.0).sqrt()))
    }

    /// Adds each point's observation-noise variance to the diagonal, turning
    /// a latent-function predictive into one for new observations.
    pub fn with_observation_noise(mut self, structure: &MogpStructure) -> Self {
        for (i, (series, _)) in self.labels.iter().enumerate() {
            self.cov[(i, i)] += structure.noise[*series];
        }
        self
    }

    /// Square-root factor `A` with `A A' = Σ̃`, negative eigenvalues
    /// clamped to zero.
    pub fn sampling_factor(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.cov.clone());
        let mut a = eig.eigenvectors;
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            a.column_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        a
    }

    /// `n x T̃` joint draws, deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(&self, n: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        let t = self.len();
        let a = self.sampling_factor();
        let z = DMatrix::from_fn(t, n, |_, _| StandardNormal.sample(rng));
        let mut draws = (a * z).transpose();
        for mut row in draws.row_iter_mut() {
            row += self.mean.transpose();
        }
        draws
    }

    /// CSV with `time,series,mean,sd,q02.5,q97.5` per test point.
    pub fn write_csv(&self, path: &Path, series_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "series", "mean", "sd", "q02.5", "q97.5"])?;
        let sd = self.sd();
        for (i, (series, time)) in self.labels.iter().enumerate() {
            let name = series_names.get(*series).cloned().unwrap_or_else(|| series.to_string());
            let m = self.mean[i];
            w.write_record([
                time.to_string(),
                name,
                m.to_string(),
                sd[i].to_string(),
                (m - Z_975 * sd[i]).to_string(),
                (m + Z_975 * sd[i]).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Draws `n` joint samples from a predictive distribution.
pub fn sample_predictive(dist: &PredictiveDistribution, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    Ok(dist.sample(n, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;
    use crate::mogp::{Coregionalization, InputSlice, LatentTerm, TermFreeze, Variant};

    fn one_rbf(noise: f64) -> MogpStructure {
        MogpStructure {
            variant: Variant::SingleOutput,
            terms: vec![LatentTerm {
                coregionalization: Coregionalization::identity(1),
                kernel: Kernel::rbf_ard(1.0, vec![1.0], vec![0]),
                slice: InputSlice::Time,
                freeze: TermFreeze::default(),
            }],
            noise: vec![noise],
            freeze_noise: false,
            noise_floor: 0.0,
        }
    }

    fn times(ts: &[f64]) -> Block {
        Block::new(0, DMatrix::from_column_slice(ts.len(), 1, ts))
    }

    #[test]
    fn scalar_log_density() {
        let v = log_marginal_likelihood(&DVector::from_element(1, 0.0), &DMatrix::identity(1, 1)).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn zero_observations_leave_complexity_term() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v = log_marginal_likelihood(&DVector::zeros(2), &s).unwrap();
        let f = factorize(&s).unwrap();
        assert!((v - (-0.5 * f.log_det() - LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn factorization_failure_is_reported() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(factorize(&s), Err(Error::Factorization { .. })));
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let s = DMatrix::from_element(3, 3, 1.0);
        let f = factorize(&s).unwrap();
        assert!(f.jitter >= 1e-8);
    }

    #[test]
    fn noiseless_interpolation() {
        let gp = FittedGp::new(one_rbf(0.0), vec![times(&[0.0, 1.0, 2.5])], DVector::from_vec(vec![0.3, -0.2, 1.1]))
            .unwrap();
        let p = gp.posterior_predictive(&[times(&[1.0])]).unwrap();
        assert!((p.mean[0] + 0.2).abs() < 1e-6);
        assert!(p.cov[(0, 0)] <= 1e-6);
    }

    #[test]
    fn far_test_point_reverts_to_prior() {
        let gp = FittedGp::new(one_rbf(0.1), vec![times(&[0.0, 1.0])], DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let p = gp.posterior_predictive(&[times(&[100.0])]).unwrap();
        assert!(p.mean[0].abs() < 1e-12);
        assert!((p.cov[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_predictive_sampling() {
        let d = PredictiveDistribution {
            mean: DVector::from_vec(vec![1.0, -2.0]),
            cov: DMatrix::zeros(2, 2),
            labels: vec![(0, 0.0), (0, 1.0)],
        };
        let s = sample_predictive(&d, 5, 1).unwrap();
        for row in s.row_iter() {
            assert_eq!(row[0], 1.0);
            assert_eq!(row[1], -2.0);
        }
        assert!(sample_predictive(&d, 0, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = PredictiveDistribution {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
            labels: vec![(0, 0.0), (0, 1.0)],
        };
        assert_eq!(d.sample(10, 42), d.sample(10, 42));
        assert_ne!(d.sample(10, 42), d.sample(10, 43));
    }
}
