//! Small descriptive-statistics helpers shared across modules.

use serde::{Deserialize, Serialize};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (divides by n - 1). Zero for a single value.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Empirical quantile by linear interpolation of order statistics
/// (Hyndman-Fan type 7). `prob` is clamped to [0, 1].
pub fn quantile(xs: &[f64], prob: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, prob)
}

pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Log density of `N(mean, sd^2)` at `x`.
pub fn normal_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// Mean, variance and an equal-tailed credible band of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

impl Summary {
    /// Summarise `xs` with a central band of mass `level` (e.g. 0.95).
    pub fn of(xs: &[f64], level: f64) -> Self {
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let tail = 0.5 * (1.0 - level);
        Summary {
            mean: mean(xs),
            variance: variance(xs),
            lower: quantile_sorted(&sorted, tail),
            median: quantile_sorted(&sorted, 0.5),
            upper: quantile_sorted(&sorted, 1.0 - tail),
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Effective sample size from the initial positive sequence of
/// autocorrelations (Geyer).
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(chain);
    let centered: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let autocorr = |lag: usize| -> f64 {
        let s: f64 = (0..n - lag).map(|i| centered[i] * centered[i + lag]).sum();
        s / n as f64 / c0
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = autocorr(lag) + autocorr(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (n as f64 / tau.max(1e-12)).min(n as f64)
}
