//! Covariance functions.
//!
//! A [`Kernel`] is a composition tree of base kernels (RBF with optional ARD,
//! Matérn with half-integer smoothness, Ornstein-Uhlenbeck on a time lag,
//! linear) closed under sums and products. Every node reads only its
//! `dims` columns from the input rows it is handed, so children of a sum or
//! product may live on different sub-spaces.
//!
//! Hyperparameters are exposed as a flat vector in natural (positive) scale,
//! in depth-first order. [`Kernel::gram_grad`] differentiates with respect
//! to one entry of that vector.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matérn smoothness restricted to the closed-form half-integer cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternNu {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
    #[serde(rename = "5/2")]
    FiveHalves,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

impl fmt::Display for MaternNu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaternNu::Half => "1/2",
            MaternNu::ThreeHalves => "3/2",
            MaternNu::FiveHalves => "5/2",
        })
    }
}

impl FromStr for MaternNu {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" | "0.5" => Ok(MaternNu::Half),
            "3/2" | "1.5" => Ok(MaternNu::ThreeHalves),
            "5/2" | "2.5" => Ok(MaternNu::FiveHalves),
            other => Err(Error::UnsupportedNu(other.to_string())),
        }
    }
}

impl TryFrom<f64> for MaternNu {
    type Error = Error;

    fn try_from(nu: f64) -> Result<Self> {
        if nu == 0.5 {
            Ok(MaternNu::Half)
        } else if nu == 1.5 {
            Ok(MaternNu::ThreeHalves)
        } else if nu == 2.5 {
            Ok(MaternNu::FiveHalves)
        } else {
            Err(Error::UnsupportedNu(nu.to_string()))
        }
    }
}

/// Squared-exponential kernel with one lengthscale per input dimension.
pub fn rbf_ard_eval(xs: &[f64], xt: &[f64], variance: f64, lengthscales: &[f64]) -> Result<f64> {
    if xs.len() != xt.len() || xs.len() != lengthscales.len() {
        return Err(Error::DimensionMismatch(format!(
            "rbf inputs of length {} and {} with {} lengthscales",
            xs.len(),
            xt.len(),
            lengthscales.len()
        )));
    }
    let q: f64 = xs
        .iter()
        .zip(xt)
        .zip(lengthscales)
        .map(|((a, b), l)| (a - b) * (a - b) / (l * l))
        .sum();
    Ok(variance * (-0.5 * q).exp())
}

/// Matérn covariance at Euclidean distance `r`.
pub fn matern_at(r: f64, nu: MaternNu, variance: f64, lengthscale: f64) -> f64 {
    match nu {
        MaternNu::Half => variance * (-r / lengthscale).exp(),
        MaternNu::ThreeHalves => {
            let a = 3f64.sqrt() * r / lengthscale;
            variance * (1.0 + a) * (-a).exp()
        }
        MaternNu::FiveHalves => {
            let a = 5f64.sqrt() * r / lengthscale;
            variance * (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

/// Matérn covariance between two points.
pub fn matern_eval(
    xs: &[f64],
    xt: &[f64],
    nu: MaternNu,
    variance: f64,
    lengthscale: f64,
) -> Result<f64> {
    if xs.len() != xt.len() {
        return Err(Error::DimensionMismatch(format!(
            "matern inputs of length {} and {}",
            xs.len(),
            xt.len()
        )));
    }
    if !(lengthscale > 0.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "matern lengthscale must be positive, got {lengthscale}"
        )));
    }
    Ok(matern_at(euclidean(xs, xt), nu, variance, lengthscale))
}

/// Ornstein-Uhlenbeck covariance `variance / (2 drift) * exp(-drift |lag|)`.
pub fn ou_time_eval(lag: f64, variance: f64, drift: f64) -> f64 {
    variance / (2.0 * drift) * (-drift * lag.abs()).exp()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// Squared exponential. With `ard` each active dimension has its own
    /// lengthscale; otherwise a single shared one.
    RbfArd {
        variance: f64,
        lengthscales: Vec<f64>,
        ard: bool,
        dims: Vec<usize>,
    },
    Matern {
        nu: MaternNu,
        variance: f64,
        lengthscale: f64,
        dims: Vec<usize>,
    },
    /// Ornstein-Uhlenbeck on the Euclidean lag between active dimensions.
    Ou {
        variance: f64,
        drift: f64,
        dims: Vec<usize>,
    },
    Linear {
        variance: f64,
        dims: Vec<usize>,
    },
    Sum {
        children: Vec<Kernel>,
    },
    Product {
        children: Vec<Kernel>,
    },
}

impl Kernel {
    pub fn rbf_ard(variance: f64, lengthscales: Vec<f64>, dims: Vec<usize>) -> Self {
        Kernel::RbfArd {
            variance,
            lengthscales,
            ard: true,
            dims,
        }
    }

    pub fn rbf_iso(variance: f64, lengthscale: f64, dims: Vec<usize>) -> Self {
        Kernel::RbfArd {
            variance,
            lengthscales: vec![lengthscale],
            ard: false,
            dims,
        }
    }

    pub fn matern(nu: MaternNu, variance: f64, lengthscale: f64, dims: Vec<usize>) -> Self {
        Kernel::Matern {
            nu,
            variance,
            lengthscale,
            dims,
        }
    }

    pub fn ou(variance: f64, drift: f64, dims: Vec<usize>) -> Self {
        Kernel::Ou {
            variance,
            drift,
            dims,
        }
    }

    pub fn linear(variance: f64, dims: Vec<usize>) -> Self {
        Kernel::Linear { variance, dims }
    }

    pub fn sum(children: Vec<Kernel>) -> Self {
        Kernel::Sum { children }
    }

    pub fn product(children: Vec<Kernel>) -> Self {
        Kernel::Product { children }
    }

    /// Checks positivity of every hyperparameter and the shape of each node.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidHyperparameter(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        match self {
            Kernel::RbfArd {
                variance,
                lengthscales,
                ard,
                dims,
            } => {
                positive("rbf variance", *variance)?;
                let expected = if *ard { dims.len() } else { 1 };
                if lengthscales.len() != expected || dims.is_empty() {
                    return Err(Error::DimensionMismatch(format!(
                        "rbf with {} active dims needs {expected} lengthscales, got {}",
                        dims.len(),
                        lengthscales.len()
                    )));
                }
                lengthscales
                    .iter()
                    .try_for_each(|l| positive("rbf lengthscale", *l))
            }
            Kernel::Matern {
                variance,
                lengthscale,
                dims,
                ..
            } => {
                non_empty(dims)?;
                positive("matern variance", *variance)?;
                positive("matern lengthscale", *lengthscale)
            }
            Kernel::Ou {
                variance,
                drift,
                dims,
            } => {
                non_empty(dims)?;
                positive("ou variance", *variance)?;
                positive("ou drift", *drift)
            }
            Kernel::Linear { variance, dims } => {
                non_empty(dims)?;
                positive("linear variance", *variance)
            }
            Kernel::Sum { children } | Kernel::Product { children } => {
                if children.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "sum and product kernels need at least two children".into(),
                    ));
                }
                children.iter().try_for_each(Kernel::validate)
            }
        }
    }

    /// Stationary kernels depend on inputs only through their difference.
    pub fn is_stationary(&self) -> bool {
        match self {
            Kernel::Linear { .. } => false,
            Kernel::Sum { children } | Kernel::Product { children } => {
                children.iter().all(Kernel::is_stationary)
            }
            _ => true,
        }
    }

    /// Largest input column index read by any node, plus one.
    pub fn required_columns(&self) -> usize {
        match self {
            Kernel::RbfArd { dims, .. }
            | Kernel::Matern { dims, .. }
            | Kernel::Ou { dims, .. }
            | Kernel::Linear { dims, .. } => dims.iter().max().map_or(0, |d| d + 1),
            Kernel::Sum { children } | Kernel::Product { children } => children
                .iter()
                .map(Kernel::required_columns)
                .max()
                .unwrap_or(0),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Kernel::RbfArd { lengthscales, .. } => 1 + lengthscales.len(),
            Kernel::Matern { .. } | Kernel::Ou { .. } => 2,
            Kernel::Linear { .. } => 1,
            Kernel::Sum { children } | Kernel::Product { children } => {
                children.iter().map(Kernel::n_params).sum()
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut Vec<f64>) {
        match self {
            Kernel::RbfArd {
                variance,
                lengthscales,
                ..
            } => {
                out.push(*variance);
                out.extend_from_slice(lengthscales);
            }
            Kernel::Matern {
                variance,
                lengthscale,
                ..
            } => out.extend([*variance, *lengthscale]),
            Kernel::Ou {
                variance, drift, ..
            } => out.extend([*variance, *drift]),
            Kernel::Linear { variance, .. } => out.push(*variance),
            Kernel::Sum { children } | Kernel::Product { children } => {
                children.iter().for_each(|c| c.collect_params(out))
            }
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "kernel has {} hyperparameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        self.assign_params(values);
        Ok(())
    }

    fn assign_params(&mut self, values: &[f64]) -> usize {
        match self {
            Kernel::RbfArd {
                variance,
                lengthscales,
                ..
            } => {
                *variance = values[0];
                let n = lengthscales.len();
                lengthscales.copy_from_slice(&values[1..1 + n]);
                1 + n
            }
            Kernel::Matern {
                variance,
                lengthscale,
                ..
            } => {
                *variance = values[0];
                *lengthscale = values[1];
                2
            }
            Kernel::Ou {
                variance, drift, ..
            } => {
                *variance = values[0];
                *drift = values[1];
                2
            }
            Kernel::Linear { variance, .. } => {
                *variance = values[0];
                1
            }
            Kernel::Sum { children } | Kernel::Product { children } => {
                let mut used = 0;
                for c in children {
                    used += c.assign_params(&values[used..]);
                }
                used
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_names("", &mut out);
        out
    }

    fn collect_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            Kernel::RbfArd { lengthscales, .. } => {
                out.push(format!("{prefix}rbf.variance"));
                for i in 0..lengthscales.len() {
                    out.push(format!("{prefix}rbf.lengthscale[{i}]"));
                }
            }
            Kernel::Matern { .. } => {
                out.push(format!("{prefix}matern.variance"));
                out.push(format!("{prefix}matern.lengthscale"));
            }
            Kernel::Ou { .. } => {
                out.push(format!("{prefix}ou.variance"));
                out.push(format!("{prefix}ou.drift"));
            }
            Kernel::Linear { .. } => out.push(format!("{prefix}linear.variance")),
            Kernel::Sum { children } => {
                for (i, c) in children.iter().enumerate() {
                    c.collect_names(&format!("{prefix}sum{i}."), out);
                }
            }
            Kernel::Product { children } => {
                for (i, c) in children.iter().enumerate() {
                    c.collect_names(&format!("{prefix}prod{i}."), out);
                }
            }
        }
    }

    /// Covariance between two full input rows.
    pub fn eval(&self, xs: &[f64], xt: &[f64]) -> Result<f64> {
        self.check_columns(xs.len())?;
        self.check_columns(xt.len())?;
        Ok(self.value(xs, xt))
    }

    fn check_columns(&self, ncols: usize) -> Result<()> {
        let need = self.required_columns();
        if ncols < need {
            return Err(Error::DimensionMismatch(format!(
                "kernel reads {need} input columns, input has {ncols}"
            )));
        }
        Ok(())
    }

    fn value(&self, xs: &[f64], xt: &[f64]) -> f64 {
        match self {
            Kernel::RbfArd {
                variance,
                lengthscales,
                ard,
                dims,
            } => {
                let q: f64 = dims
                    .iter()
                    .enumerate()
                    .map(|(r, &d)| {
                        let l = if *ard { lengthscales[r] } else { lengthscales[0] };
                        let diff = xs[d] - xt[d];
                        diff * diff / (l * l)
                    })
                    .sum();
                variance * (-0.5 * q).exp()
            }
            Kernel::Matern {
                nu,
                variance,
                lengthscale,
                dims,
            } => matern_at(dist(xs, xt, dims), *nu, *variance, *lengthscale),
            Kernel::Ou {
                variance,
                drift,
                dims,
            } => ou_time_eval(dist(xs, xt, dims), *variance, *drift),
            Kernel::Linear { variance, dims } => {
                variance * dims.iter().map(|&d| xs[d] * xt[d]).sum::<f64>()
            }
            Kernel::Sum { children } => children.iter().map(|c| c.value(xs, xt)).sum(),
            Kernel::Product { children } => children.iter().map(|c| c.value(xs, xt)).product(),
        }
    }

    /// Writes the partial derivatives with respect to every hyperparameter
    /// into `grad` (length `n_params`) and returns the covariance value.
    fn value_and_grad(&self, xs: &[f64], xt: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Kernel::RbfArd {
                variance,
                lengthscales,
                ard,
                dims,
            } => {
                let mut q = 0.0;
                if *ard {
                    for (r, &d) in dims.iter().enumerate() {
                        let diff = xs[d] - xt[d];
                        let l = lengthscales[r];
                        q += diff * diff / (l * l);
                    }
                } else {
                    let l = lengthscales[0];
                    q = dims
                        .iter()
                        .map(|&d| (xs[d] - xt[d]) * (xs[d] - xt[d]))
                        .sum::<f64>()
                        / (l * l);
                }
                let base = (-0.5 * q).exp();
                let k = variance * base;
                grad[0] = base;
                if *ard {
                    for (r, &d) in dims.iter().enumerate() {
                        let diff = xs[d] - xt[d];
                        let l = lengthscales[r];
                        grad[1 + r] = k * diff * diff / (l * l * l);
                    }
                } else {
                    // q = s / l^2, dk/dl = k * q / l
                    grad[1] = k * q / lengthscales[0];
                }
                k
            }
            Kernel::Matern {
                nu,
                variance,
                lengthscale,
                dims,
            } => {
                let r = dist(xs, xt, dims);
                let l = *lengthscale;
                let (k, dk_dl) = match nu {
                    MaternNu::Half => {
                        let e = (-r / l).exp();
                        (variance * e, variance * e * r / (l * l))
                    }
                    MaternNu::ThreeHalves => {
                        let a = 3f64.sqrt() * r / l;
                        let e = (-a).exp();
                        (variance * (1.0 + a) * e, variance * a * a * e / l)
                    }
                    MaternNu::FiveHalves => {
                        let a = 5f64.sqrt() * r / l;
                        let e = (-a).exp();
                        (
                            variance * (1.0 + a + a * a / 3.0) * e,
                            variance * a * a * (1.0 + a) * e / (3.0 * l),
                        )
                    }
                };
                grad[0] = k / variance;
                grad[1] = dk_dl;
                k
            }
            Kernel::Ou {
                variance,
                drift,
                dims,
            } => {
                let lag = dist(xs, xt, dims);
                let k = ou_time_eval(lag, *variance, *drift);
                grad[0] = k / variance;
                grad[1] = -k / drift - lag * k;
                k
            }
            Kernel::Linear { variance, dims } => {
                let dot: f64 = dims.iter().map(|&d| xs[d] * xt[d]).sum();
                grad[0] = dot;
                variance * dot
            }
            Kernel::Sum { children } => {
                let mut offset = 0;
                let mut total = 0.0;
                for c in children {
                    let n = c.n_params();
                    total += c.value_and_grad(xs, xt, &mut grad[offset..offset + n]);
                    offset += n;
                }
                total
            }
            Kernel::Product { children } => {
                let mut values = Vec::with_capacity(children.len());
                let mut offset = 0;
                for c in children {
                    let n = c.n_params();
                    values.push(c.value_and_grad(xs, xt, &mut grad[offset..offset + n]));
                    offset += n;
                }
                let mut offset = 0;
                for (j, c) in children.iter().enumerate() {
                    let others: f64 = values
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != j)
                        .map(|(_, v)| v)
                        .product();
                    let n = c.n_params();
                    grad[offset..offset + n].iter_mut().for_each(|g| *g *= others);
                    offset += n;
                }
                values.iter().product()
            }
        }
    }

    /// Gram matrix between the rows of `xa` and the rows of `xb`.
    pub fn gram(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_columns(xa.ncols())?;
        self.check_columns(xb.ncols())?;
        let rows_a = rows(xa);
        let rows_b = rows(xb);
        Ok(DMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| {
            self.value(&rows_a[i], &rows_b[j])
        }))
    }

    /// Gram matrix together with its derivative with respect to every
    /// hyperparameter (natural scale).
    pub fn gram_with_grads(
        &self,
        xa: &DMatrix<f64>,
        xb: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_columns(xa.ncols())?;
        self.check_columns(xb.ncols())?;
        let rows_a = rows(xa);
        let rows_b = rows(xb);
        let p = self.n_params();
        let (na, nb) = (xa.nrows(), xb.nrows());
        let mut k = DMatrix::zeros(na, nb);
        let mut grads = vec![DMatrix::zeros(na, nb); p];
        let mut g = vec![0.0; p];
        for i in 0..na {
            for j in 0..nb {
                k[(i, j)] = self.value_and_grad(&rows_a[i], &rows_b[j], &mut g);
                for (m, gv) in grads.iter_mut().zip(&g) {
                    m[(i, j)] = *gv;
                }
            }
        }
        Ok((k, grads))
    }

    /// Elementwise derivative of the Gram matrix with respect to
    /// hyperparameter `index`.
    pub fn gram_grad(
        &self,
        xa: &DMatrix<f64>,
        xb: &DMatrix<f64>,
        index: usize,
    ) -> Result<DMatrix<f64>> {
        let count = self.n_params();
        if index >= count {
            return Err(Error::UnknownHyperparameter { index, count });
        }
        let (_, mut grads) = self.gram_with_grads(xa, xb)?;
        Ok(grads.swap_remove(index))
    }
}

fn non_empty(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        Err(Error::DimensionMismatch("kernel has no active dims".into()))
    } else {
        Ok(())
    }
}

fn dist(xs: &[f64], xt: &[f64], dims: &[usize]) -> f64 {
    dims.iter()
        .map(|&d| (xs[d] - xt[d]) * (xs[d] - xt[d]))
        .sum::<f64>()
        .sqrt()
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}
