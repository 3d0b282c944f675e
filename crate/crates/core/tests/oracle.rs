use panelboot::models::normal_means;
use panelboot::oracle::special::normal_quantile;
use panelboot::oracle::{
    bootstrap_exact_law, exact_coverage, mle_exact_law, percentile_coverage_quadrature, second_moment_truth,
    studentized_exact_law, Gamma3, InvGamma3, PercentileMode, Studentized,
};
use panelboot::StreamKey;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// `phi_hat / phi_0` for one simulated panel: pooled within sum of squares
/// over `nm`.
fn phi_ratio(n: usize, m: usize, rng: &mut impl Rng) -> f64 {
    let mut ss = 0.0;
    let mut z = vec![0.0; m];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mean = z.iter().sum::<f64>() / m as f64;
        ss += z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    ss / (n * m) as f64
}

#[test]
fn mle_law_matches_simulated_estimates() {
    let (n, m, reps) = (5, 4, 20_000);
    let mut rng = StreamKey::new(1).rng();
    let root = ((n * m) as f64).sqrt();
    let mut draws: Vec<f64> = (0..reps).map(|_| root * (phi_ratio(n, m, &mut rng) - 1.0)).collect();
    draws.sort_by(f64::total_cmp);
    let law = mle_exact_law(n, m, 1.0).unwrap();
    let ks = draws
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let c = law.cdf(x);
            (c - k as f64 / reps as f64).abs().max(((k + 1) as f64 / reps as f64 - c).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.63 / (reps as f64).sqrt(), "KS {ks}");
}

#[test]
fn wald_coverage_matches_simulation() {
    let (n, m, reps) = (10, 10, 100_000);
    let mut rng = StreamKey::new(2).rng();
    let z = normal_quantile(0.975);
    let root = ((n * m) as f64 / 2.0).sqrt();
    let hits = (0..reps)
        .filter(|_| {
            let r = phi_ratio(n, m, &mut rng);
            (root * (r - 1.0) / r).abs() <= z
        })
        .count() as f64
        / reps as f64;
    let exact = exact_coverage(Studentized::Hat, n, m, 0.95).unwrap();
    let se = (exact * (1.0 - exact) / reps as f64).sqrt();
    assert!((hits - exact).abs() < 3.0 * se, "{hits} vs {exact}");
}

#[test]
fn percentile_quadrature_matches_simulation() {
    let (n, m, reps) = (10, 10, 40_000);
    let mut rng = StreamKey::new(3).rng();
    let root = ((n * m) as f64).sqrt();
    let hits = (0..reps)
        .filter(|_| {
            let phi = phi_ratio(n, m, &mut rng);
            let law = bootstrap_exact_law(n, m, phi).unwrap();
            let (lo, hi) = (phi - law.quantile(0.975) / root, phi - law.quantile(0.025) / root);
            lo <= 1.0 && 1.0 <= hi
        })
        .count() as f64
        / reps as f64;
    let exact = percentile_coverage_quadrature(n, m, 1.0, 0.95, PercentileMode::Full).unwrap();
    let se = (exact * (1.0 - exact) / reps as f64).sqrt();
    assert!((hits - exact).abs() < 3.0 * se, "{hits} vs {exact}");
}

#[test]
fn percentile_quadrature_is_free_of_phi0() {
    for mode in [PercentileMode::FirstOrder, PercentileMode::Full] {
        let a = percentile_coverage_quadrature(20, 10, 1.0, 0.95, mode).unwrap();
        let b = percentile_coverage_quadrature(20, 10, 3.7, 0.95, mode).unwrap();
        assert!((a - b).abs() < 1e-8, "{mode:?}: {a} vs {b}");
    }
}

#[test]
fn plug_in_second_moment_bias_and_variance() {
    let (n, m, reps) = (20, 5, 40_000);
    let eta: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
    let truth = second_moment_truth(1.0, &eta, n, m).unwrap();
    let mut rng = StreamKey::new(4).rng();
    let est: Vec<f64> = (0..reps)
        .map(|_| {
            let data = normal_means::simulate(1.0, &eta, m, &mut rng).unwrap();
            let t = normal_means::closed_form_mle(&data).unwrap();
            t.eta.iter().map(|e| e * e).sum::<f64>() / n as f64
        })
        .collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (truth.variance / reps as f64).sqrt();
    assert!((mean - truth.delta - truth.bias).abs() < 3.0 * se);
    assert!((var / truth.variance - 1.0).abs() < 0.03);
}

proptest! {
    #[test]
    fn percentile_t_coverage_is_nominal(n in 1usize..500, m in 2usize..60, level in 0.5f64..0.999) {
        prop_assert_eq!(exact_coverage(Studentized::Star, n, m, level).unwrap(), level);
    }

    #[test]
    fn mle_law_moments_are_closed_form(n in 1usize..300, m in 2usize..40, phi0 in 0.01f64..50.0) {
        let g = mle_exact_law(n, m, phi0).unwrap();
        let root = ((n * m) as f64).sqrt();
        let mean = -root * phi0 / m as f64;
        let var = 2.0 * phi0 * phi0 * (m - 1) as f64 / m as f64;
        prop_assert!((g.mean() - mean).abs() <= 1e-10 * mean.abs().max(1.0));
        prop_assert!((g.variance() - var).abs() <= 1e-10 * var.max(1.0));
        prop_assert!((g.mean() - (g.location + g.shape * g.scale)).abs() == 0.0);
    }

    #[test]
    fn gamma_quantile_inverts_cdf(shape in 0.2f64..500.0, scale in 0.01f64..10.0, loc in -10.0f64..10.0, p in 0.001f64..0.999) {
        let g = Gamma3::new(loc, shape, scale).unwrap();
        prop_assert!((g.cdf(g.quantile(p)) - p).abs() < 1e-10);
    }

    #[test]
    fn inverse_gamma_quantile_inverts_cdf(shape in 0.5f64..500.0, scale in 0.01f64..10.0, loc in -10.0f64..10.0, mirrored: bool, p in 0.001f64..0.999) {
        let g = InvGamma3::new(loc, shape, scale, mirrored).unwrap();
        prop_assert!((g.cdf(g.quantile(p)) - p).abs() < 1e-10);
    }

    #[test]
    fn bootstrap_statistic_shares_the_sample_law(n in 1usize..200, m in 2usize..30) {
        let hat = studentized_exact_law(n, m, Studentized::Hat).unwrap();
        let star = studentized_exact_law(n, m, Studentized::Star).unwrap();
        prop_assert_eq!(hat, star);
    }
}
