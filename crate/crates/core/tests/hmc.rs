use gpsc_core::gp::{lml_and_gradient, FittedGp};
use gpsc_core::hmc::{
    counterfactual_posterior, hmc_sample, leapfrog, HmcConfig, LoadingPosterior, LogDensity, Mass, PriorSpec, SampledParams,
};
use gpsc_core::mogp::{Block, ParamSelection, Variant};
use gpsc_core::stats::{mean, variance};
use gpsc_core::synthetic::random_instance;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn gaussian_2d(rho: f64) -> (usize, impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>) {
    let det = 1.0 - rho * rho;
    (2, move |x: &[f64]| {
        let (a, b) = (x[0], x[1]);
        let q = (a * a - 2.0 * rho * a * b + b * b) / det;
        Some((-0.5 * q, vec![-(a - rho * b) / det, -(b - rho * a) / det]))
    })
}

fn std_normal(dim: usize) -> (usize, impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>) {
    (dim, |x: &[f64]| Some((-0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| -v).collect())))
}

fn posterior(seed: u64, sampled: SampledParams) -> LoadingPosterior {
    let (s, blocks, y) = random_instance(Variant::TwoFactor, 3, 5, seed).unwrap();
    LoadingPosterior::new(s, blocks, y, sampled, PriorSpec::default()).unwrap()
}

#[test]
fn correlated_gaussian_moments() {
    let target = gaussian_2d(0.8);
    let config = HmcConfig {
        step_size: 0.2,
        n_leapfrog: 10,
        n_samples: 5000,
        seed: 1,
        ..Default::default()
    };
    let out = hmc_sample(&target, &[0.0, 0.0], &config).unwrap();
    let a: Vec<f64> = out.samples.column(0).iter().copied().collect();
    let b: Vec<f64> = out.samples.column(1).iter().copied().collect();
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
    assert!(ma.abs() < 0.05 && mb.abs() < 0.05, "means {ma} {mb}");
    assert!((variance(&a) - 1.0).abs() < 0.1 && (variance(&b) - 1.0).abs() < 0.1);
    assert!((cov - 0.8).abs() < 0.1, "cov {cov}");
}

#[test]
fn tiny_steps_are_almost_always_accepted() {
    let target = gaussian_2d(0.8);
    let config = HmcConfig {
        step_size: 1e-5,
        n_leapfrog: 10,
        n_samples: 500,
        seed: 2,
        ..Default::default()
    };
    let out = hmc_sample(&target, &[0.3, -0.2], &config).unwrap();
    assert!(out.diagnostics.acceptance_rate > 0.99);
}

#[test]
fn harmonic_oscillator_energy_error_is_small() {
    let target = std_normal(1);
    for (x0, p0) in [(1.0, 0.0), (-0.5, 1.2), (2.0, -1.0)] {
        let tr = leapfrog(&target, &[x0], &[p0], &[-x0], 0.1, 10, &Mass::Identity).unwrap();
        let h0 = 0.5 * x0 * x0 + 0.5 * p0 * p0;
        let h1 = -tr.log_density + 0.5 * tr.momentum[0] * tr.momentum[0];
        assert!((h1 - h0).abs() < 0.01);
        // Exact flow for comparison: a rotation by εL = 1.
        let (c, s) = (1.0f64.cos(), 1.0f64.sin());
        assert!((tr.theta[0] - (x0 * c + p0 * s)).abs() < 0.01);
    }
}

#[test]
fn leapfrog_preserves_volume() {
    let target = gaussian_2d(0.5);
    let f = |z: &[f64]| {
        let g = target.log_density(&z[..2]).unwrap().1;
        let tr = leapfrog(&target, &z[..2], &z[2..], &g, 0.15, 7, &Mass::Identity).unwrap();
        [tr.theta, tr.momentum].concat()
    };
    let z0 = [0.4, -0.3, 0.9, 0.2];
    let h = 1e-6;
    let jac = DMatrix::from_fn(4, 4, |i, j| {
        let (mut zp, mut zm) = (z0, z0);
        zp[j] += h;
        zm[j] -= h;
        (f(&zp)[i] - f(&zm)[i]) / (2.0 * h)
    });
    assert!((jac.determinant() - 1.0).abs() < 1e-6);
}

#[test]
fn prior_only_chain_recovers_the_loading_prior() {
    let mut target = posterior(3, SampledParams::Loadings);
    target.prior_only = true;
    let config = HmcConfig {
        step_size: 2.0,
        n_leapfrog: 10,
        n_samples: 5000,
        seed: 4,
        ..Default::default()
    };
    let out = hmc_sample(&target, &target.initial(), &config).unwrap();
    for j in 0..target.dim() {
        let c: Vec<f64> = out.samples.column(j).iter().copied().collect();
        let se_mean = 10.0 / (out.diagnostics.ess[j].max(1.0)).sqrt();
        assert!(mean(&c).abs() < 4.0 * se_mean, "mean {}", mean(&c));
        assert!((variance(&c).sqrt() - 10.0).abs() < 1.5, "sd {}", variance(&c).sqrt());
    }
}

#[test]
fn chain_started_in_the_target_does_not_drift() {
    let target = std_normal(3);
    let config = HmcConfig {
        step_size: 0.3,
        n_leapfrog: 8,
        n_samples: 5000,
        burn_in: 0.0,
        seed: 5,
        ..Default::default()
    };
    let out = hmc_sample(&target, &[0.5, -1.0, 0.2], &config).unwrap();
    let half = 2500;
    for j in 0..3 {
        let c: Vec<f64> = out.samples.column(j).iter().copied().collect();
        let (a, b) = (mean(&c[..half]), mean(&c[half..]));
        let se = (2.0 / (out.diagnostics.ess[j] / 2.0)).sqrt();
        assert!((a - b).abs() < 4.0 * se, "halves {a} {b}");
        assert!((variance(&c) - 1.0).abs() < 0.1);
    }
}

#[test]
fn washed_out_likelihood_leaves_the_prior_gradient() {
    let mut target = posterior(6, SampledParams::Loadings);
    target.structure.noise.iter_mut().for_each(|w| *w = 1e12);
    let theta = vec![0.7; target.dim()];
    let (_, g) = target.log_density(&theta).unwrap();
    for gi in g {
        assert!((gi - (-0.7 / 100.0)).abs() < 1e-6, "{gi}");
    }
}

#[test]
fn fast_likelihood_matches_generic_gradient() {
    for seed in 0..5 {
        let target = posterior(seed, SampledParams::LoadingsAndNoise);
        let theta = target.initial();
        let mut flat = target.clone();
        flat.prior = PriorSpec {
            loading_sd: 1e150,
            noise_shape: 0.0,
            noise_rate: 0.0,
            ..PriorSpec::default()
        };
        let s = target.structure_at(&theta);
        let (value, grad) = lml_and_gradient(&s, &target.blocks, &target.y, &target.params).unwrap();
        let (lp, g) = flat.log_density(&theta).unwrap();
        assert!((lp - value).abs() < 1e-9 * value.abs().max(1.0), "{lp} vs {value}");
        for (a, b) in g.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn identical_draws_pool_to_single_model_sampling() {
    let (s, blocks, y) = random_instance(Variant::TwoFactor, 2, 6, 9).unwrap();
    let test = vec![Block::new(0, DMatrix::from_row_slice(3, 3, &[8.0, 0.1, 0.0, 9.0, 0.2, -0.1, 10.0, 0.0, 0.3]))];
    let params = s.parameters(ParamSelection::Loadings);
    let theta = s.values(&params);
    let draws = DMatrix::from_fn(5, params.len(), |_, j| theta[j]);
    let pooled = counterfactual_posterior(&s, &params, &draws, &blocks, &y, &test, 400, false, 10).unwrap();
    let single = FittedGp::new(s, blocks, y).unwrap().posterior_predictive(&test).unwrap();
    let n = pooled.paths.nrows() as f64;
    for t in 0..3 {
        let c: Vec<f64> = pooled.paths.column(t).iter().copied().collect();
        let sd = single.cov[(t, t)].sqrt();
        assert!((mean(&c) - single.mean[t]).abs() < 4.0 * sd / n.sqrt());
        assert!((variance(&c) / single.cov[(t, t)] - 1.0).abs() < 0.1);
    }
}

#[test]
fn pooled_variance_dominates_within_draw_variance() {
    let target = posterior(14, SampledParams::Loadings);
    let config = HmcConfig {
        step_size: 0.05,
        n_leapfrog: 10,
        n_samples: 30,
        seed: 15,
        ..Default::default()
    };
    let chain = hmc_sample(&target, &target.initial(), &config).unwrap();
    let test = vec![Block::new(0, DMatrix::from_fn(4, 3, |r, c| if c == 0 { 8.0 + r as f64 } else { 0.2 }))];
    let n_pred = 40;
    let s = &target.structure;
    let cf = counterfactual_posterior(s, &target.params, &chain.samples, &target.blocks, &target.y, &test, n_pred, true, 16).unwrap();
    let draws = cf.paths.nrows() / n_pred;
    for t in 0..4 {
        let col: Vec<f64> = cf.paths.column(t).iter().copied().collect();
        let grand = mean(&col);
        let total: f64 = col.iter().map(|v| (v - grand).powi(2)).sum();
        let within: f64 = col
            .chunks(n_pred)
            .map(|c| {
                let m = mean(c);
                c.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            })
            .sum();
        assert_eq!(draws * n_pred, col.len());
        assert!(total >= within * (1.0 - 1e-12), "t={t}: {total} < {within}");
    }
}

#[test]
fn counterfactual_paths_are_joint_draws() {
    let (s, blocks, y) = random_instance(Variant::OneFactor, 2, 6, 12).unwrap();
    let test = vec![Block::new(0, DMatrix::from_fn(6, 3, |r, c| if c == 0 { 7.0 + 0.5 * r as f64 } else { 0.1 }))];
    let params = s.parameters(ParamSelection::Loadings);
    let draws = DMatrix::from_row_slice(1, params.len(), &s.values(&params));
    let k = 20_000;
    let cf = counterfactual_posterior(&s, &params, &draws, &blocks, &y, &test, k, false, 13).unwrap();
    let pred = FittedGp::new(s, blocks, y).unwrap().posterior_predictive(&test).unwrap();
    for t in 0..5 {
        let a: Vec<f64> = cf.paths.column(t).iter().map(|v| v - pred.mean[t]).collect();
        let b: Vec<f64> = cf.paths.column(t + 1).iter().map(|v| v - pred.mean[t + 1]).collect();
        let r = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
            / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
        let implied = pred.cov[(t, t + 1)] / (pred.cov[(t, t)] * pred.cov[(t + 1, t + 1)]).sqrt();
        // Standard error of a correlation estimate: (1 - ρ²)/√K.
        let se = (1.0 - implied * implied) / (k as f64).sqrt();
        assert!((r - implied).abs() < 4.0 * se + 1e-3, "lag-1 {r} vs {implied}");
    }
}

#[test]
fn bands_cover_an_untreated_world() {
    use gpsc_core::model::{prepare, Window};
    use gpsc_core::stats::quantile_sorted;
    use gpsc_core::synthetic::{simulate_panel, SyntheticConfig};
    // The generating model conditioned on raw outcomes, with loadings drawn by a short chain.
    let (mut covered, mut total) = (0usize, 0usize);
    for rep in 0..50 {
        let p = simulate_panel(&SyntheticConfig {
            seed: 500 + rep,
            effect: 0.0,
            ..Default::default()
        })
        .unwrap();
        let md = prepare(&p.dataset, Variant::TwoFactor, &Window::counterfactual(&p.dataset)).unwrap();
        let raw: Vec<f64> = md
            .train
            .blocks
            .iter()
            .flat_map(|b| p.dataset.series[b.series].y[..b.len()].to_vec())
            .collect();
        let y = DVector::from_vec(raw);
        let target = LoadingPosterior::new(p.truth.clone(), md.train.blocks.clone(), y.clone(), SampledParams::Loadings, PriorSpec::default()).unwrap();
        let config = HmcConfig {
            step_size: 0.02,
            n_leapfrog: 10,
            n_samples: 20,
            seed: rep,
            ..Default::default()
        };
        let chain = hmc_sample(&target, &target.initial(), &config).unwrap();
        let cf = counterfactual_posterior(&p.truth, &target.params, &chain.samples, &md.train.blocks, &y, &md.test, 25, true, rep).unwrap();
        for t in 0..md.y_test.len() {
            let mut c: Vec<f64> = cf.paths.column(t).iter().copied().collect();
            c.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile_sorted(&c, 0.025), quantile_sorted(&c, 0.975));
            covered += usize::from(lo <= md.y_test[t] && md.y_test[t] <= hi);
            total += 1;
        }
    }
    let rate = covered as f64 / total as f64;
    assert!((rate - 0.95).abs() <= 0.05, "pointwise coverage {rate}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn posterior_gradient_matches_finite_differences(seed in 0u64..10_000, noise in any::<bool>()) {
        let sampled = if noise { SampledParams::LoadingsAndNoise } else { SampledParams::Loadings };
        let target = posterior(seed, sampled);
        let theta = target.initial();
        let (_, g) = target.log_density(&theta).unwrap();
        let h = 1e-5;
        for j in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (target.log_density(&up).unwrap().0 - target.log_density(&dn).unwrap().0) / (2.0 * h);
            let rel = (g[j] - fd).abs() / fd.abs().max(g[j].abs()).max(1e-3);
            prop_assert!(rel < 1e-5, "component {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn leapfrog_round_trip(x in prop::collection::vec(-2.0f64..2.0, 2), p in prop::collection::vec(-2.0f64..2.0, 2)) {
        let target = gaussian_2d(0.8);
        let g0 = target.log_density(&x).unwrap().1;
        let fwd = leapfrog(&target, &x, &p, &g0, 0.05, 20, &Mass::Identity).unwrap();
        let neg: Vec<f64> = fwd.momentum.iter().map(|v| -v).collect();
        let back = leapfrog(&target, &fwd.theta, &neg, &fwd.grad, 0.05, 20, &Mass::Identity).unwrap();
        for i in 0..2 {
            prop_assert!((back.theta[i] - x[i]).abs() < 1e-8);
            prop_assert!((back.momentum[i] + p[i]).abs() < 1e-8);
        }
    }
}
