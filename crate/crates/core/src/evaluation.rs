//! Pre-intervention model selection.
//!
//! Forecasts are scored on a held-out tail of the treated series' pre-period.
//! Donors are screened by DTW distance to the treated series, then every
//! donor subset is fitted with every configured model.

use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::HeterotopicDataset;
use crate::error::{Error, Result};
use crate::model::{prepare, ModelSpec, Window};
use crate::optimizer::{fit_ml2, OptimizerConfig};
use crate::stats::{self, LN_2PI};

/// Contiguous pre-period split, as 0-based treated row ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    /// 1-based split time `t*`.
    pub t_star: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Splits a pre-period of `t0` points at `t* = floor(ratio · t0)`: train
/// covers times `1..t*` (exclusive) and test covers `t*..=t0`.
pub fn train_test_split(t0: usize, ratio: f64) -> Result<Split> {
    if t0 < 6 {
        return Err(Error::InvalidArgument(format!("pre-period of {t0} points is too short to split (need 6)")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let t_star = (ratio * t0 as f64).floor() as usize;
    if t_star < 2 || t_star >= t0 {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} leaves an empty train or test window for t0 = {t0}"
        )));
    }
    Ok(Split {
        t_star,
        train: 0..t_star - 1,
        test: t_star - 1..t0,
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a} observations, {b} predictions")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("empty test window".into()));
    }
    Ok(())
}

pub fn mse(y: &[f64], mean: &[f64]) -> Result<f64> {
    check_lengths(y.len(), mean.len())?;
    Ok(y.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Negative mean Gaussian log predictive density (lower is better).
pub fn log_score(y: &[f64], mean: &[f64], sd: &[f64]) -> Result<f64> {
    check_lengths(y.len(), mean.len())?;
    check_lengths(y.len(), sd.len())?;
    if let Some(s) = sd.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("predictive sd {s} is not positive")));
    }
    let total: f64 = y
        .iter()
        .zip(mean)
        .zip(sd)
        .map(|((y, m), s)| {
            let z = (y - m) / s;
            0.5 * LN_2PI + s.ln() + 0.5 * z * z
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Sample energy score of joint forecasts (`N x h`, one draw per row).
pub fn energy_score(y: &[f64], samples: &DMatrix<f64>) -> Result<f64> {
    let (n, h) = samples.shape();
    if h != y.len() {
        return Err(Error::DimensionMismatch(format!("{} observations, samples of width {h}", y.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("energy score needs at least one sample".into()));
    }
    let nf = n as f64;
    let first: f64 = samples
        .row_iter()
        .map(|r| r.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / nf;
    let pair_sum = if h == 1 {
        // Σ_k Σ_c |x_k − x_c| = 2 Σ_i (2i − n + 1) x_(i) over sorted values.
        let mut xs: Vec<f64> = samples.column(0).iter().copied().collect();
        xs.sort_by(f64::total_cmp);
        2.0 * xs
            .iter()
            .enumerate()
            .map(|(i, x)| (2.0 * i as f64 - nf + 1.0) * x)
            .sum::<f64>()
    } else {
        let mut s = 0.0;
        for k in 0..n {
            for c in k + 1..n {
                let d: f64 = (0..h).map(|t| (samples[(k, t)] - samples[(c, t)]).powi(2)).sum();
                s += 2.0 * d.sqrt();
            }
        }
        s
    };
    Ok((first - pair_sum / (2.0 * nf * nf)).max(0.0))
}

/// DTW with absolute-difference cost and the match/insert/delete steps.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("DTW needs non-empty series".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (ai - b[j - 1]).abs();
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

pub fn z_score(x: &[f64]) -> Vec<f64> {
    let m = stats::mean(x);
    let s = stats::std_dev(x);
    let s = if s.is_finite() && s > 0.0 { s } else { 1.0 };
    x.iter().map(|v| (v - m) / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorScore {
    pub series_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Screening {
    pub ranked: Vec<DonorScore>,
    pub warnings: Vec<String>,
}

/// Ranks candidates by DTW distance between z-scored series and keeps the
/// closest `top_n`. Ties are broken by series id.
pub fn screen_donors(candidates: &[(String, Vec<f64>)], treated: &[f64], top_n: usize) -> Result<Screening> {
    let target = z_score(treated);
    let mut ranked = candidates
        .iter()
        .map(|(id, y)| {
            Ok(DonorScore {
                series_id: id.clone(),
                distance: dtw_distance(&z_score(y), &target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.series_id.cmp(&b.series_id)));
    let mut warnings = Vec::new();
    if candidates.len() < top_n {
        let w = format!("only {} candidates for {top_n} donor slots", candidates.len());
        warn!("{w}");
        warnings.push(w);
    }
    ranked.truncate(top_n);
    Ok(Screening { ranked, warnings })
}

/// Screens the controls of `ds` against the treated pre-period. Each control
/// is compared over the same number of leading observations.
pub fn screen_dataset(ds: &HeterotopicDataset, top_n: usize) -> Result<Screening> {
    let t = ds.treated();
    let pre = &t.y[..t.t0.expect("treated series has t0")];
    let candidates: Vec<(String, Vec<f64>)> = ds
        .controls()
        .map(|c| (c.id.clone(), c.y[..pre.len().min(c.len())].to_vec()))
        .collect();
    screen_donors(&candidates, pre, top_n)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub choose: usize,
    pub split_ratio: f64,
    /// Predictive draws per model for the energy score.
    pub es_samples: usize,
    pub noise_floor: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Worker threads.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            choose: 4,
            split_ratio: 2.0 / 3.0,
            es_samples: 1000,
            noise_floor: 0.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub model: String,
    pub donors: Vec<String>,
    pub mse: f64,
    pub log_score: f64,
    pub energy_score: f64,
    /// `ok` or the failure message.
    pub status: String,
    pub log_ml: f64,
    pub n_params: usize,
    pub wall_time_s: f64,
}

impl ScoreCard {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// The winning donor set and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub model: ModelSpec,
    pub donors: Vec<String>,
    pub energy_score: f64,
}

/// Fits `spec` on the train split of `ds` and scores the treated forecast.
pub fn score_model(ds: &HeterotopicDataset, spec: &ModelSpec, config: &SearchConfig, seed: u64) -> ScoreCard {
    let start = Instant::now();
    let donors: Vec<String> = ds.controls().map(|c| c.id.clone()).collect();
    let mut card = ScoreCard {
        model: spec.name.clone(),
        donors,
        mse: f64::NAN,
        log_score: f64::NAN,
        energy_score: f64::NAN,
        status: "ok".into(),
        log_ml: f64::NAN,
        n_params: 0,
        wall_time_s: 0.0,
    };
    let result = (|| -> Result<()> {
        let t0 = ds.treated().t0.expect("treated series has t0");
        let split = train_test_split(t0, config.split_ratio)?;
        let window = Window {
            train_end: split.train.end,
            predict: split.test.clone(),
        };
        let md = prepare(ds, spec.variant, &window)?;
        let structure = md.build(spec, config.noise_floor)?;
        card.n_params = structure.count_parameters();
        let mut opt = config.optimizer.clone();
        opt.seed = seed;
        let fit = fit_ml2(&structure, &md.train, &opt)?;
        card.log_ml = fit.gp.log_ml;
        let dist = fit.gp.posterior_predictive(&md.test)?.with_observation_noise(&fit.gp.structure);
        let sc = md.treated_scale();
        let mean: Vec<f64> = dist.mean.iter().map(|v| sc.invert(*v)).collect();
        let sd: Vec<f64> = dist.sd().iter().map(|v| v * sc.sd).collect();
        card.mse = mse(&md.y_test, &mean)?;
        card.log_score = log_score(&md.y_test, &mean, &sd)?;
        let draws = md.paths_to_original(&dist.sample(config.es_samples.max(1), seed ^ 0x5eed));
        card.energy_score = energy_score(&md.y_test, &draws)?;
        Ok(())
    })();
    if let Err(e) = result {
        card.status = e.to_string();
    }
    card.wall_time_s = start.elapsed().as_secs_f64();
    card
}

/// SplitMix64 step, used to derive independent per-fit seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fits every `choose`-subset of `donors` with every model and returns the
/// cards ranked by energy score (failed fits last). The ranking is stable:
/// equal scores keep enumeration order.
pub fn combination_search(
    ds: &HeterotopicDataset,
    donors: &[String],
    models: &[ModelSpec],
    config: &SearchConfig,
) -> Result<Vec<ScoreCard>> {
    if donors.len() < config.choose || config.choose == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot choose {} of {} donors",
            config.choose,
            donors.len()
        )));
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models configured".into()));
    }
    let combos = combinations(donors.len(), config.choose);
    let jobs: Vec<(usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..models.len()).map(move |m| (c, m)))
        .collect();
    info!("combination search: {} subsets x {} models", combos.len(), models.len());
    let subsets: Vec<Result<HeterotopicDataset>> = combos
        .iter()
        .map(|c| ds.subset(&c.iter().map(|&i| donors[i].clone()).collect::<Vec<_>>()))
        .collect();

    let results: Mutex<Vec<Option<ScoreCard>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(c, m)) = jobs.get(j) else {
            break;
        };
        let card = match &subsets[c] {
            Ok(sub) => score_model(sub, &models[m], config, mix_seed(config.seed, c as u64, m as u64)),
            Err(e) => ScoreCard {
                model: models[m].name.clone(),
                donors: combos[c].iter().map(|&i| donors[i].clone()).collect(),
                mse: f64::NAN,
                log_score: f64::NAN,
                energy_score: f64::NAN,
                status: e.to_string(),
                log_ml: f64::NAN,
                n_params: 0,
                wall_time_s: 0.0,
            },
        };
        results.lock().expect("no worker panicked")[j] = Some(card);
    };
    let threads = config.jobs.max(1).min(jobs.len());
    if threads <= 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    let mut cards: Vec<ScoreCard> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();
    cards.sort_by(|a, b| match (a.is_ok(), b.is_ok()) {
        (true, true) => a.energy_score.total_cmp(&b.energy_score),
        (true, false) => std::cmp::Ordering::Less,
        (false, true) => std::cmp::Ordering::Greater,
        (false, false) => std::cmp::Ordering::Equal,
    });
    Ok(cards)
}

/// The best successful card, if any.
pub fn select(cards: &[ScoreCard], models: &[ModelSpec]) -> Option<Selection> {
    let best = cards.iter().find(|c| c.is_ok())?;
    let model = models.iter().find(|m| m.name == best.model)?.clone();
    Some(Selection {
        model,
        donors: best.donors.clone(),
        energy_score: best.energy_score,
    })
}

/// Ranked cards as CSV. Wall time is left out so reruns are byte-identical.
pub fn write_scorecards(cards: &[ScoreCard], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "model", "donors", "mse", "log_score", "energy_score", "log_ml", "n_params", "status"])?;
    for (i, c) in cards.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            c.model.clone(),
            c.donors.join(";"),
            c.mse.to_string(),
            c.log_score.to_string(),
            c.energy_score.to_string(),
            c.log_ml.to_string(),
            c.n_params.to_string(),
            c.status.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let s = train_test_split(30, 2.0 / 3.0).unwrap();
        assert_eq!(s.t_star, 20);
        assert_eq!(s.train.len(), 19);
        assert_eq!(s.test.len(), 11);
        assert_eq!(s.train.end, s.test.start);
        assert!(train_test_split(30, 1.0).is_err());
        assert!(train_test_split(5, 0.5).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn log_score_at_the_mean() {
        let s = log_score(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!((s - 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!(log_score(&[0.0], &[0.0], &[2.0]).unwrap() > s);
        assert!(log_score(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn energy_score_reductions() {
        let y = [1.0, 2.0];
        let same = DMatrix::from_fn(5, 2, |_, t| y[t]);
        assert_eq!(energy_score(&y, &same).unwrap(), 0.0);
        let one = DMatrix::from_row_slice(1, 2, &[4.0, 6.0]);
        assert!((energy_score(&y, &one).unwrap() - 5.0).abs() < 1e-15);
        assert!(energy_score(&[1.0], &one).is_err());
    }

    #[test]
    fn energy_score_sorted_formula_matches_pairs() {
        let xs = [0.3, -1.2, 2.5, 0.3, 0.9];
        let m = DMatrix::from_column_slice(5, 1, &xs);
        let fast = energy_score(&[0.1], &m).unwrap();
        let mut pairs = 0.0;
        for a in xs {
            for b in xs {
                pairs += (a - b as f64).abs();
            }
        }
        let slow = xs.iter().map(|x| (x - 0.1f64).abs()).sum::<f64>() / 5.0 - pairs / 50.0;
        assert!((fast - slow).abs() < 1e-14);
    }

    #[test]
    fn dtw_hand_tables() {
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert!(dtw_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn combination_counts() {
        assert_eq!(combinations(8, 4).len(), 70);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(4, 2)[..3], [vec![0, 1], vec![0, 2], vec![0, 3]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn screening_ties_and_shortfall() {
        let t = vec![1.0, 2.0, 3.0, 2.0];
        let c = vec![
            ("b".to_string(), t.clone()),
            ("a".to_string(), t.clone()),
            ("c".to_string(), vec![3.0, 1.0, 0.0, 5.0]),
        ];
        let s = screen_donors(&c, &t, 5).unwrap();
        assert_eq!(s.ranked[0].series_id, "a");
        assert_eq!(s.ranked[1].series_id, "b");
        assert_eq!(s.ranked[0].distance, 0.0);
        assert_eq!(s.warnings.len(), 1);
    }
}
