use panelboot::bootstrap::{run_replicates, BootstrapConfig, BootstrapRun, Side};
use panelboot::models::{dynamic_logit, normal_means, DynamicLogitModel, InitialCondition, NormalMeansModel};
use panelboot::oracle::{bootstrap_exact_law, studentized_exact_law, Studentized};
use panelboot::{fit, FitOptions, FitResult, PanelDataset, PanelModel, StreamKey};

fn normal_panel(n: usize, m: usize, seed: u64) -> (PanelDataset, FitResult) {
    let eta: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let data = normal_means::simulate(1.0, &eta, m, &mut StreamKey::new(seed).rng()).unwrap();
    let f = fit(&NormalMeansModel, &data, &NormalMeansModel.default_start(&data), &FitOptions::default()).unwrap();
    (data, f)
}

fn logit_panel(seed: u64) -> (PanelDataset, FitResult) {
    let eta: Vec<f64> = (0..40).map(|i| (i as f64 - 20.0) / 15.0).collect();
    let data = dynamic_logit::simulate(0.5, &eta, 8, InitialCondition::Stationary, &mut StreamKey::new(seed).rng()).unwrap();
    let f = fit(&DynamicLogitModel, &data, &DynamicLogitModel.default_start(&data), &FitOptions::default()).unwrap();
    (data, f)
}

fn run(model: &dyn PanelModel, data: &PanelDataset, f: &FitResult, b: usize, seed: u64) -> BootstrapRun {
    let cfg = BootstrapConfig {
        replicates: b,
        ..BootstrapConfig::default()
    };
    run_replicates(model, data, f, None, &cfg, StreamKey::new(seed)).unwrap()
}

/// Standard deviation of the empirical `p`-quantile from `b` draws of a law
/// with density `dens` at that quantile.
fn quantile_sd(p: f64, b: usize, dens: f64) -> f64 {
    (p * (1.0 - p) / b as f64).sqrt() / dens
}

#[test]
fn percentile_endpoints_match_exact_bootstrap_law() {
    let (n, m, b) = (10, 5, 20_000);
    let (data, f) = normal_panel(n, m, 1);
    let r = run(&NormalMeansModel, &data, &f, b, 2);
    let iv = r.percentile(&[1.0], 0.95, Side::TwoSided).unwrap();
    let phi = f.theta.phi[0];
    let law = bootstrap_exact_law(n, m, phi).unwrap();
    let root = ((n * m) as f64).sqrt();
    for (p, got) in [(0.975, iv.lower), (0.025, iv.upper)] {
        let q = law.quantile(p);
        let expect = phi - q / root;
        let tol = 4.0 * quantile_sd(p, b, law.pdf(q)) / root;
        assert!((got - expect).abs() < tol, "p = {p}: {got} vs {expect} (tol {tol})");
    }
}

#[test]
fn percentile_t_endpoints_match_exact_pivot() {
    let (n, m, b) = (10, 5, 20_000);
    let (data, f) = normal_panel(n, m, 3);
    let r = run(&NormalMeansModel, &data, &f, b, 4);
    let iv = r.percentile_t(&[1.0], 0.95, Side::TwoSided).unwrap();
    let phi = f.theta.phi[0];
    let se = (2.0 * phi * phi / (n * m) as f64).sqrt();
    let law = studentized_exact_law(n, m, Studentized::Star).unwrap();
    for (p, got) in [(0.975, iv.lower), (0.025, iv.upper)] {
        let q = law.quantile(p);
        let expect = phi - q * se;
        let tol = 4.0 * quantile_sd(p, b, law.pdf(q)) * se;
        assert!((got - expect).abs() < tol, "p = {p}: {got} vs {expect} (tol {tol})");
    }
}

#[test]
fn intervals_nest_across_levels() {
    let (data, f) = logit_panel(5);
    let r = run(&DynamicLogitModel, &data, &f, 199, 6);
    for method in [BootstrapRun::percentile, BootstrapRun::percentile_t] {
        let ivs: Vec<_> = [0.90, 0.95, 0.99]
            .iter()
            .map(|&l| method(&r, &[1.0], l, Side::TwoSided).unwrap())
            .collect();
        for w in ivs.windows(2) {
            assert!(w[1].lower <= w[0].lower && w[0].upper <= w[1].upper);
        }
    }
}

#[test]
fn replicates_do_not_depend_on_thread_count() {
    let (data, f) = logit_panel(7);
    let runs: Vec<String> = [1, 4, 8]
        .iter()
        .map(|&t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            format!("{:?}", pool.install(|| run(&DynamicLogitModel, &data, &f, 99, 8)))
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn stratum_labels_do_not_matter() {
    let (data, f) = logit_panel(9);
    let relabeled = data
        .clone()
        .with_labels((0..data.n()).map(|i| format!("unit-{}", 1000 - i)).collect())
        .unwrap();
    let a = run(&DynamicLogitModel, &data, &f, 99, 10).percentile(&[1.0], 0.95, Side::TwoSided).unwrap();
    let b = run(&DynamicLogitModel, &relabeled, &f, 99, 10).percentile(&[1.0], 0.95, Side::TwoSided).unwrap();
    assert_eq!(a, b);
}

#[test]
fn logit_replicates_keep_the_original_drops() {
    let (data, f) = logit_panel(11);
    assert!(!f.dropped_strata.is_empty());
    let r = run(&DynamicLogitModel, &data, &f, 99, 12);
    assert_eq!(r.nm, f.retained_nm(data.m()));
    assert!(r.replicates.len() + r.failures.count == 99);
}
