mod common;

use common::ks::{ks_p_value, ks_statistic};
use common::quadrature::tanh_sinh;
use common::synthetic::{fixture_covariates, synthetic_data, MOMENTS_FIXTURE};
use elicit_core::aggregate::{
    build_mixture, fit_hierarchical, marginals_from_moments, mixture_summary, parse_moments_table, pseudo_samples,
    sample_mixture, AggregateError, CovariateMatrix, GibbsConfig, PosteriorDraw, PseudoData,
};
use elicit_core::distfit::BetaParams;
use elicit_core::elicitation::Round;

fn beta(a: f64, b: f64) -> BetaParams {
    BetaParams::new(a, b).unwrap()
}

#[test]
fn workshop_profile_indicator_columns_match_tallies() {
    let x = fixture_covariates();
    assert_eq!(x.n_experts(), 12);
    let sum = |j: usize| x.column(j).iter().sum::<f64>();
    assert_eq!(sum(1), 12.0);
    assert_eq!(sum(2), 2.0);
    assert_eq!(sum(4), 10.0);
    assert_eq!(sum(5), 11.0);
    for j in [0, 3] {
        assert!(sum(j).abs() < 1e-12);
    }
}

#[test]
fn logit_mean_matches_quadrature() {
    let b = beta(2.0, 18.0);
    // B(2, 18) = 1 / 342
    let density = |x: f64| 342.0 * x * (1.0 - x).powi(17);
    let expected = tanh_sinh(|x| (x / (1.0 - x)).ln() * density(x), 0.0, 1.0);
    // digamma(2) - digamma(18) = 1 - H_17
    let harmonic: f64 = (1..=17).map(|k| 1.0 / k as f64).sum();
    assert!((expected - (1.0 - harmonic)).abs() < 1e-10);
    let second = tanh_sinh(|x| (x / (1.0 - x)).ln().powi(2) * density(x), 0.0, 1.0);
    let sd = (second - expected * expected).sqrt();

    let k = 100_000;
    let z = pseudo_samples(&[(b, b)], k, 77).unwrap();
    for arm in &z.z[0] {
        let m = arm.iter().sum::<f64>() / k as f64;
        assert!((m - expected).abs() < 4.0 * sd / (k as f64).sqrt(), "{m} vs {expected}");
    }
}

#[test]
fn pseudo_samples_reject_small_k() {
    assert!(matches!(
        pseudo_samples(&[(beta(1.0, 1.0), beta(1.0, 1.0))], 99, 0),
        Err(AggregateError::TooFewPseudoSamples { .. })
    ));
}

#[test]
fn sampler_recovers_generating_parameters() {
    let (sigma, rho, tau) = (0.5, 0.6, 0.3);
    let (data, x) = synthetic_data(sigma, rho, tau, 500, 2024);
    let post = fit_hierarchical(&data, &x, GibbsConfig { seed: 11, ..GibbsConfig::default() }).unwrap();
    assert_eq!(post.draws.len(), 4 * 10_000);
    let checks: [(&str, f64, fn(&PosteriorDraw) -> f64); 3] =
        [("sigma", sigma, |d| d.sigma), ("rho", rho, |d| d.rho), ("tau", tau, |d| d.tau)];
    for (name, truth, f) in checks {
        let (m, s) = (post.mean_of(f), post.sd_of(f));
        assert!((m - truth).abs() < 3.0 * s, "{name}: mean {m}, sd {s}, truth {truth}");
    }
    assert!(post.diagnostics.converged, "{:?}", post.diagnostics.rhat);
    assert!(!post.diagnostics.degenerate_data);
    for rate in &post.diagnostics.rho_acceptance {
        assert!((0.1..0.6).contains(rate), "{rate}");
    }
    for d in &post.draws {
        assert!(d.sigma > 0.0 && d.tau > 0.0 && d.rho > -1.0 && d.rho < 1.0);
    }
}

#[test]
fn constant_pseudo_data_is_flagged() {
    let x = fixture_covariates();
    let z = (0..12).map(|i| [vec![-2.0 + 0.1 * i as f64; 200], vec![-1.8; 200]]).collect();
    let cfg = GibbsConfig { chains: 2, burn_in: 200, draws: 400, seed: 3 };
    let post = fit_hierarchical(&PseudoData { z }, &x, cfg).unwrap();
    assert!(post.diagnostics.degenerate_data);
}

#[test]
fn single_expert_is_rejected() {
    let (data, x) = synthetic_data(0.5, 0.0, 0.3, 100, 1);
    let one = PseudoData { z: vec![data.z[0].clone()] };
    let x1 = CovariateMatrix { rows: vec![x.rows[0]] };
    assert!(matches!(fit_hierarchical(&one, &x1, GibbsConfig::default()), Err(AggregateError::TooFewExperts(1))));
}

#[test]
fn chains_are_reproducible() {
    let (data, x) = synthetic_data(0.5, 0.3, 0.3, 100, 5);
    let cfg = GibbsConfig { chains: 2, burn_in: 100, draws: 200, seed: 8 };
    assert_eq!(fit_hierarchical(&data, &x, cfg).unwrap(), fit_hierarchical(&data, &x, cfg).unwrap());
}

fn column(s: &elicit_core::aggregate::PriorSampleSet, f: fn(&elicit_core::aggregate::PriorDraw) -> f64) -> Vec<f64> {
    s.rows.iter().map(f).collect()
}

#[test]
fn uniform_marginals_survive_independent_copula() {
    let m = build_mixture(&[(beta(1.0, 1.0), beta(1.0, 1.0))], 0.0).unwrap();
    let s = sample_mixture(&m, 100_000, 31);
    for col in [column(&s, |r| r.p1), column(&s, |r| r.p2)] {
        let d = ks_statistic(&col, |x| x.clamp(0.0, 1.0));
        assert!(ks_p_value(d, col.len()) > 0.01, "D = {d}");
    }
}

#[test]
fn copula_preserves_beta_marginals() {
    let cases = [
        (beta(2.0, 18.0), beta(3.0, 25.0), -0.7),
        (beta(1.5, 12.0), beta(1.2, 9.0), 0.3),
        (beta(5.0, 40.0), beta(2.0, 2.0), 0.95),
    ];
    for (i, (a, b, r)) in cases.into_iter().enumerate() {
        let s = sample_mixture(&build_mixture(&[(a, b)], r).unwrap(), 100_000, 100 + i as u64);
        for (col, dist) in [(column(&s, |r| r.p1), a), (column(&s, |r| r.p2), b)] {
            let d = ks_statistic(&col, |x| dist.cdf(x));
            assert!(ks_p_value(d, col.len()) > 0.01, "case {i}: D = {d}");
        }
    }
}

fn corr(s: &elicit_core::aggregate::PriorSampleSet) -> f64 {
    mixture_summary(s).unwrap().corr_p1_p2
}

#[test]
fn strong_copula_gives_strong_sample_correlation() {
    let b = beta(2.0, 18.0);
    let s = sample_mixture(&build_mixture(&[(b, b)], 0.99).unwrap(), 50_000, 2);
    assert!(corr(&s) > 0.9);
}

#[test]
fn coupling_is_monotone_under_common_numbers() {
    let b = beta(2.0, 18.0);
    let cs: Vec<f64> = [-0.5, 0.0, 0.5, 0.9]
        .iter()
        .map(|&r| corr(&sample_mixture(&build_mixture(&[(b, b)], r).unwrap(), 50_000, 9)))
        .collect();
    assert!(cs.windows(2).all(|w| w[0] <= w[1]), "{cs:?}");
}

#[test]
fn mixture_means_average_component_means() {
    let rows = parse_moments_table(MOMENTS_FIXTURE).unwrap();
    let marg: Vec<_> = marginals_from_moments(&rows, Round::Two).unwrap().into_iter().map(|(_, h, l)| (h, l)).collect();
    let m = build_mixture(&marg, 0.3).unwrap();
    let n = 200_000;
    let s = sample_mixture(&m, n, 4);
    let sum = mixture_summary(&s).unwrap();
    let avg = |f: fn(&(BetaParams, BetaParams)) -> f64| marg.iter().map(f).sum::<f64>() / marg.len() as f64;
    let (e1, e2) = (avg(|c| c.0.mean()), avg(|c| c.1.mean()));
    assert!((sum.p1.mean - e1).abs() < 4.0 * sum.p1.sd / (n as f64).sqrt());
    assert!((sum.p2.mean - e2).abs() < 4.0 * sum.p2.sd / (n as f64).sqrt());
    assert!((sum.delta.mean - (sum.p2.mean - sum.p1.mean)).abs() < 1e-12);
    assert!((e1 - 0.08).abs() < 1e-3);
}

#[test]
fn single_component_mixture_is_that_prior() {
    let (a, b) = (beta(2.0, 18.0), beta(3.0, 20.0));
    let one = build_mixture(&[(a, b)], 0.4).unwrap();
    let two = build_mixture(&[(a, b), (a, b)], 0.4).unwrap();
    let (s1, s2) = (sample_mixture(&one, 50_000, 6), sample_mixture(&two, 50_000, 6));
    let (m1, m2) = (mixture_summary(&s1).unwrap(), mixture_summary(&s2).unwrap());
    assert!((m1.p1.mean - m2.p1.mean).abs() < 1e-12 || (m1.p1.mean - a.mean()).abs() < 4.0 * m1.p1.sd / 50_000f64.sqrt());
}
