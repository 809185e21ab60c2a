//! Bound-constrained limited-memory BFGS and type-II maximum likelihood.
//!
//! Each iteration identifies the variables held at a bound by the
//! projected gradient, builds a two-loop L-BFGS direction on the remaining
//! free variables, and searches along it. When the full step stays inside
//! the box the search enforces the strong Wolfe conditions; otherwise it
//! backtracks along the projected path with an Armijo test.

use std::collections::VecDeque;
use std::path::Path;

use log::debug;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{lml_and_gradient, FittedGp};
use crate::mogp::{Block, MogpStructure, ParamInfo, ParamSelection};

pub const ARMIJO_C1: f64 = 1e-4;
pub const WOLFE_C2: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Threshold on the infinity norm of the projected gradient.
    pub grad_tol: f64,
    /// Relative reduction below which the run stops.
    pub ftol: f64,
    /// Per-coordinate `[lower, upper]`; `None` means unbounded.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Independent runs in [`fit_ml2`]; the first starts at the structure's
    /// current values, the others at log-normal perturbations of them.
    pub restarts: usize,
    /// Standard deviation of the log-space restart perturbation.
    pub restart_jitter: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 20,
            max_iter: 500,
            grad_tol: 1e-5,
            ftol: 1e-12,
            bounds: None,
            restarts: 3,
            restart_jitter: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Projected gradient below `grad_tol`.
    Converged,
    /// Nothing to optimize.
    ConvergedTrivially,
    /// Relative decrease in the objective below `ftol`.
    SmallReduction,
    MaxIterations,
    LineSearchFailed,
}

impl Status {
    pub fn is_converged(self) -> bool {
        matches!(
            self,
            Status::Converged | Status::ConvergedTrivially | Status::SmallReduction
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub f: f64,
    pub proj_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
}

impl Minimum {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "f", "proj_grad_norm"])?;
        for r in &self.trace {
            w.write_record([r.iter.to_string(), r.f.to_string(), r.proj_grad_norm.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

struct Box_ {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Box_ {
    fn new(n: usize, bounds: Option<&[(f64, f64)]>) -> Result<Self> {
        match bounds {
            None => Ok(Box_ {
                lower: vec![f64::NEG_INFINITY; n],
                upper: vec![f64::INFINITY; n],
            }),
            Some(b) => {
                if b.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "{} bounds for {n} variables",
                        b.len()
                    )));
                }
                if let Some((l, u)) = b.iter().find(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidArgument(format!("bound [{l}, {u}] is empty")));
                }
                Ok(Box_ {
                    lower: b.iter().map(|p| p.0).collect(),
                    upper: b.iter().map(|p| p.1).collect(),
                })
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (xi, gi))| ((xi - gi).clamp(self.lower[i], self.upper[i]) - xi).abs())
            .fold(0.0, f64::max)
    }

    /// Variables not pinned at a bound by the sign of the gradient.
    fn free_mask(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| {
                let at_lower = x[i] <= self.lower[i] && g[i] > 0.0;
                let at_upper = x[i] >= self.upper[i] && g[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect()
    }

    /// Largest step along `d` that stays feasible.
    fn max_step(&self, x: &[f64], d: &[f64]) -> f64 {
        let mut a = f64::INFINITY;
        for i in 0..x.len() {
            if d[i] > 0.0 && self.upper[i].is_finite() {
                a = a.min((self.upper[i] - x[i]) / d[i]);
            } else if d[i] < 0.0 && self.lower[i].is_finite() {
                a = a.min((self.lower[i] - x[i]) / d[i]);
            }
        }
        a.max(0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn masked(v: &[f64], free: &[bool]) -> Vec<f64> {
    v.iter().zip(free).map(|(x, f)| if *f { *x } else { 0.0 }).collect()
}

/// Applies the L-BFGS inverse-Hessian approximation (initial scaling
/// `gamma · I`) to `g`, restricted to the coordinates where `free` is set.
/// Returns `H g`; the search direction is its negation.
pub fn two_loop_direction(g: &[f64], history: &[(Vec<f64>, Vec<f64>)], gamma: f64, free: &[bool]) -> Vec<f64> {
    let mut q = masked(g, free);
    let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = history
        .iter()
        .filter_map(|(s, y)| {
            let (s, y) = (masked(s, free), masked(y, free));
            let sy = dot(&s, &y);
            (sy > 0.0).then(|| (s, y, 1.0 / sy))
        })
        .collect();
    let mut alphas = vec![0.0; pairs.len()];
    for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[k] = a;
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
    }
    q.iter_mut().for_each(|v| *v *= gamma);
    for (k, (s, y, rho)) in pairs.iter().enumerate() {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (alphas[k] - b) * si);
    }
    q
}

struct Counter<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Counter<F> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evals += 1;
        let (f, g) = (self.f)(x);
        if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            (f, g)
        } else {
            (f64::INFINITY, g)
        }
    }
}

struct Step {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Strong Wolfe search on `x + a d` for `a ∈ (0, a_max]`.
fn wolfe_search<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    obj: &mut Counter<F>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    a_init: f64,
    a_max: f64,
) -> Option<Step> {
    let line = Line { x, d, f0, dphi0: dot(g0, d) };
    let mut prev = Point { a: 0.0, f: f0, dphi: line.dphi0 };
    let mut a = a_init.min(a_max);
    for i in 0..40 {
        let (step, dphi) = line.eval(obj, a);
        if !step.f.is_finite() {
            return line.zoom(obj, prev, a, None);
        }
        if !line.armijo(a, step.f) || (i > 0 && step.f >= prev.f) {
            return line.zoom(obj, prev, a, Some(step.f));
        }
        if dphi.abs() <= -WOLFE_C2 * line.dphi0 {
            return Some(step);
        }
        let cur = Point { a, f: step.f, dphi };
        if dphi >= 0.0 {
            return line.zoom(obj, cur, prev.a, Some(prev.f)).or(Some(step));
        }
        if a >= a_max {
            // Sufficient decrease holds; the box stops further extrapolation.
            return Some(step);
        }
        prev = cur;
        a = (2.0 * a).min(a_max);
    }
    None
}

#[derive(Clone, Copy)]
struct Point {
    a: f64,
    f: f64,
    dphi: f64,
}

struct Line<'a> {
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dphi0: f64,
}

impl Line<'_> {
    fn eval<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(&self, obj: &mut Counter<F>, a: f64) -> (Step, f64) {
        let xa: Vec<f64> = self.x.iter().zip(self.d).map(|(xi, di)| xi + a * di).collect();
        let (f, g) = obj.eval(&xa);
        let dphi = if f.is_finite() { dot(&g, self.d) } else { f64::NAN };
        (Step { x: xa, f, g }, dphi)
    }

    fn armijo(&self, a: f64, f: f64) -> bool {
        f.is_finite() && f <= self.f0 + ARMIJO_C1 * a * self.dphi0
    }

    /// Narrows a bracket whose `lo` end satisfies sufficient decrease.
    fn zoom<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
        &self,
        obj: &mut Counter<F>,
        mut lo: Point,
        mut a_hi: f64,
        mut f_hi: Option<f64>,
    ) -> Option<Step> {
        let mut best: Option<Step> = None;
        for _ in 0..40 {
            let (left, right) = (lo.a.min(a_hi), lo.a.max(a_hi));
            let width = right - left;
            if width <= 1e-16 * right.max(1.0) {
                break;
            }
            // Quadratic fit through lo and hi, safeguarded to the inner 80%.
            let delta = a_hi - lo.a;
            let mut a = match f_hi {
                Some(fh) => lo.a - 0.5 * lo.dphi * delta * delta / (fh - lo.f - lo.dphi * delta),
                None => f64::NAN,
            };
            if !a.is_finite() || a < left + 0.1 * width || a > right - 0.1 * width {
                a = 0.5 * (lo.a + a_hi);
            }
            let (step, dphi) = self.eval(obj, a);
            if !self.armijo(a, step.f) || step.f >= lo.f {
                a_hi = a;
                f_hi = step.f.is_finite().then_some(step.f);
                continue;
            }
            if dphi.abs() <= -WOLFE_C2 * self.dphi0 {
                return Some(step);
            }
            if dphi * (a_hi - lo.a) >= 0.0 {
                a_hi = lo.a;
                f_hi = Some(lo.f);
            }
            lo = Point { a, f: step.f, dphi };
            best = Some(step);
        }
        best
    }
}

/// Minimizes `f` (returning value and gradient) from `x0` within the
/// configured bounds.
pub fn lbfgsb_minimize<F>(f: F, x0: &[f64], config: &OptimizerConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let bx = Box_::new(n, config.bounds.as_deref())?;
    let mut obj = Counter { f, evals: 0 };
    let mut x = x0.to_vec();
    bx.project(&mut x);
    if n == 0 {
        let (fv, g) = obj.eval(&x);
        if !fv.is_finite() {
            return Err(Error::NonFiniteStart);
        }
        return Ok(Minimum {
            x,
            f: fv,
            grad: g,
            status: Status::ConvergedTrivially,
            iterations: 0,
            evaluations: obj.evals,
            trace: Vec::new(),
        });
    }
    let (mut fx, mut g) = obj.eval(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let memory = config.memory.max(1);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(memory);
    let mut trace = Vec::new();
    let mut status = Status::MaxIterations;
    let mut iterations = 0;

    for iter in 0..config.max_iter {
        let pg = bx.projected_gradient_norm(&x, &g);
        trace.push(TraceRow {
            iter,
            f: fx,
            proj_grad_norm: pg,
        });
        if pg < config.grad_tol {
            status = Status::Converged;
            break;
        }
        iterations = iter + 1;
        let free = bx.free_mask(&x, &g);

        let mut step = None;
        for attempt in 0..2 {
            let steepest = attempt == 1 || history.is_empty();
            let mut d: Vec<f64> = if steepest {
                masked(&g, &free).iter().map(|v| -v).collect()
            } else {
                let hist: Vec<_> = history.iter().cloned().collect();
                let (s, y) = hist.last().expect("history is non-empty");
                let (s, y) = (masked(s, &free), masked(y, &free));
                let yy = dot(&y, &y);
                let gamma = if yy > 0.0 { (dot(&s, &y) / yy).max(1e-12) } else { 1.0 };
                two_loop_direction(&g, &hist, gamma, &free).iter().map(|v| -v).collect()
            };
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                history.clear();
                d = masked(&g, &free).iter().map(|v| -v).collect();
                slope = dot(&g, &d);
                if !(slope < 0.0) {
                    break;
                }
            }
            let a_init = if steepest {
                (1.0 / d.iter().fold(0.0f64, |m, v| m.max(v.abs()))).min(1.0)
            } else {
                1.0
            };
            let a_max = bx.max_step(&x, &d);
            step = if a_max >= a_init {
                wolfe_search(&mut obj, &x, fx, &g, &d, a_init, a_max)
            } else {
                None
            };
            if step.is_none() {
                step = projected_backtrack(&mut obj, &bx, &x, fx, &g, &d, a_init);
            }
            if step.is_some() {
                break;
            }
            history.clear();
        }
        let Some(step) = step else {
            status = Status::LineSearchFailed;
            break;
        };
        let sx: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        debug_assert!(
            step.f <= fx + ARMIJO_C1 * dot(&g, &sx) + 1e-12 * fx.abs().max(1.0),
            "accepted step violates sufficient decrease"
        );
        let yv: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&sx, &yv) > 1e-10 * dot(&yv, &yv) {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((sx, yv));
        }
        let reduction = fx - step.f;
        x = step.x;
        g = step.g;
        let f_old = fx;
        fx = step.f;
        if reduction <= config.ftol * f_old.abs().max(fx.abs()).max(1.0) {
            let pg = bx.projected_gradient_norm(&x, &g);
            trace.push(TraceRow {
                iter: iter + 1,
                f: fx,
                proj_grad_norm: pg,
            });
            status = if pg < config.grad_tol {
                Status::Converged
            } else {
                Status::SmallReduction
            };
            break;
        }
    }
    debug!(
        "lbfgsb: {:?} after {} iterations, {} evaluations, f = {}",
        status, iterations, obj.evals, fx
    );
    Ok(Minimum {
        x,
        f: fx,
        grad: g,
        status,
        iterations,
        evaluations: obj.evals,
        trace,
    })
}

fn projected_backtrack<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    obj: &mut Counter<F>,
    bx: &Box_,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    a_init: f64,
) -> Option<Step> {
    let mut a = a_init;
    for _ in 0..60 {
        let mut xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        bx.project(&mut xa);
        let moved: Vec<f64> = xa.iter().zip(x).map(|(p, q)| p - q).collect();
        let decrease = dot(g0, &moved);
        if decrease < 0.0 {
            let (fa, ga) = obj.eval(&xa);
            if fa.is_finite() && fa <= f0 + ARMIJO_C1 * decrease {
                return Some(Step { x: xa, f: fa, g: ga });
            }
        }
        a *= 0.5;
    }
    None
}

/// Observations and their input blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub blocks: Vec<Block>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Ml2Fit {
    pub gp: FittedGp,
    pub status: Status,
    pub initial_log_ml: f64,
    /// Best log marginal likelihood of each run (NaN for failed runs).
    pub run_log_ml: Vec<f64>,
    pub failed_runs: usize,
    pub params: Vec<ParamInfo>,
    pub trace: Vec<TraceRow>,
}

/// Type-II maximum likelihood over the structure's free hyperparameters.
pub fn fit_ml2(structure: &MogpStructure, data: &TrainingData, config: &OptimizerConfig) -> Result<Ml2Fit> {
    structure.validate()?;
    let params = structure.parameters(ParamSelection::Free);
    let bounds: Vec<(f64, f64)> = params.iter().map(|p| (p.lower, p.upper)).collect();
    let x0 = structure.values(&params);

    let objective = |theta: &[f64]| -> (f64, Vec<f64>) {
        let mut s = structure.clone();
        s.set_values(&params, theta);
        match lml_and_gradient(&s, &data.blocks, &data.y, &params) {
            Ok((v, g)) => (-v, g.into_iter().map(|x| -x).collect()),
            Err(_) => (f64::INFINITY, vec![0.0; theta.len()]),
        }
    };
    let initial_log_ml = {
        let mut x = x0.clone();
        clamp(&mut x, &bounds);
        -objective(&x).0
    };

    let mut cfg = config.clone();
    cfg.bounds = Some(bounds.clone());
    let runs = config.restarts.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, config.restart_jitter.max(0.0)).expect("finite sd");
    let mut best: Option<Minimum> = None;
    let mut run_log_ml = Vec::with_capacity(runs);
    let mut failed = 0;
    for run in 0..runs {
        let mut start = x0.clone();
        if run > 0 {
            for (v, p) in start.iter_mut().zip(&params) {
                let e: f64 = jitter.sample(&mut rng);
                if p.kind.log_scale() {
                    *v += e;
                } else {
                    *v *= e.exp();
                }
            }
        }
        clamp(&mut start, &bounds);
        match lbfgsb_minimize(objective, &start, &cfg) {
            Ok(m) => {
                run_log_ml.push(-m.f);
                if best.as_ref().is_none_or(|b| m.f < b.f) {
                    best = Some(m);
                }
            }
            Err(e) => {
                debug!("ML-II run {run} failed: {e}");
                run_log_ml.push(f64::NAN);
                failed += 1;
            }
        }
    }
    let best = best.ok_or(Error::Factorization { jitter: f64::NAN })?;
    let mut fitted = structure.clone();
    fitted.set_values(&params, &best.x);
    let gp = FittedGp::new(fitted, data.blocks.clone(), data.y.clone())?;
    Ok(Ml2Fit {
        gp,
        status: best.status,
        initial_log_ml,
        run_log_ml,
        failed_runs: failed,
        params,
        trace: best.trace,
    })
}

fn clamp(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (l, u)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*l, *u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(center: f64) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) {
        move |x: &[f64]| ((x[0] - center).powi(2), vec![2.0 * (x[0] - center)])
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn unbounded_quadratic() {
        let cfg = OptimizerConfig {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let m = lbfgsb_minimize(quad(3.0), &[0.0], &cfg).unwrap();
        assert!((m.x[0] - 3.0).abs() < 1e-8, "{:?}", m);
        assert!(m.status.is_converged());
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let cfg = OptimizerConfig {
            grad_tol: 1e-10,
            max_iter: 1000,
            ftol: 0.0,
            ..Default::default()
        };
        let m = lbfgsb_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn boundary_solution() {
        let cfg = OptimizerConfig {
            bounds: Some(vec![(1.0, 2.0)]),
            ..Default::default()
        };
        let m = lbfgsb_minimize(quad(0.0), &[1.5], &cfg).unwrap();
        assert_eq!(m.x[0], 1.0);
        assert_eq!(m.status, Status::Converged);
    }

    #[test]
    fn evaluated_points_stay_in_bounds() {
        let bounds = vec![(-0.5, 0.5), (0.2, 3.0)];
        let cfg = OptimizerConfig {
            bounds: Some(bounds.clone()),
            ..Default::default()
        };
        let f = |x: &[f64]| {
            for (v, (l, u)) in x.iter().zip(&bounds) {
                assert!(*v >= *l && *v <= *u, "evaluated outside the box: {x:?}");
            }
            rosenbrock(x)
        };
        let m = lbfgsb_minimize(f, &[0.0, 1.0], &cfg).unwrap();
        assert!((m.x[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn accepted_iterates_do_not_increase() {
        let m = lbfgsb_minimize(rosenbrock, &[-1.2, 1.0], &OptimizerConfig::default()).unwrap();
        for w in m.trace.windows(2) {
            assert!(w[1].f <= w[0].f);
        }
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64]| (f64::NAN, vec![0.0]);
        assert!(matches!(
            lbfgsb_minimize(f, &[0.0], &OptimizerConfig::default()),
            Err(Error::NonFiniteStart)
        ));
    }

    #[test]
    fn empty_problem_converges_trivially() {
        let m = lbfgsb_minimize(|_: &[f64]| (1.0, vec![]), &[], &OptimizerConfig::default()).unwrap();
        assert_eq!(m.status, Status::ConvergedTrivially);
    }

    #[test]
    fn trace_round_trips_to_csv() {
        let m = lbfgsb_minimize(rosenbrock, &[-1.2, 1.0], &OptimizerConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        m.write_trace(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("iter,f,proj_grad_norm\n"));
        assert_eq!(text.lines().count(), m.trace.len() + 1);
    }
}
