mod common;

use common::*;
use panelboot::models::{dynamic_logit, normal_means, DynamicLogitModel, InitialCondition, NormalMeansModel};
use panelboot::newton::{assemble, fit_traced};
use panelboot::panel::total_loglik;
use panelboot::{fit, FitOptions, ModelKind, PanelModel, ParameterPoint, StreamKey};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partitioned_iterates_match_dense_logit(seed in any::<u64>()) {
        prop_assert!(newton_route_gap(ModelKind::DynamicLogit, StreamKey::new(seed), 6) < 1e-9);
    }

    #[test]
    fn partitioned_iterates_match_dense_normal(seed in any::<u64>()) {
        prop_assert!(newton_route_gap(ModelKind::NormalMeans, StreamKey::new(seed), 4) < 1e-9);
    }

    #[test]
    fn normal_fit_hits_closed_form(seed in any::<u64>(), n in 1usize..40, m in 2usize..15) {
        let mut rng = StreamKey::new(seed).rng();
        let eta: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let data = normal_means::simulate(rng.random_range(0.1..4.0), &eta, m, &mut rng).unwrap();
        let f = fit(&NormalMeansModel, &data, &NormalMeansModel.default_start(&data), &FitOptions::default()).unwrap();
        let cf = normal_means::closed_form_mle(&data).unwrap();
        prop_assert!(f.converged);
        prop_assert!(sup_dist(&f.theta, &cf) < 1e-10);
    }
}

#[test]
fn fit_trace_follows_dense_newton_near_the_maximum() {
    for s in 0..20 {
        let (data, _) = random_instance(ModelKind::DynamicLogit, StreamKey::new(500 + s));
        let model = &DynamicLogitModel;
        let f = fit(model, &data, &model.default_start(&data), &FitOptions::default()).unwrap();
        let mut start = f.theta.clone();
        start.phi[0] += 0.05;
        for e in &mut start.eta {
            *e -= 0.05;
        }
        let opts = FitOptions {
            tol_score: Some(1e-12),
            ..FitOptions::default()
        };
        let (_, trace) = fit_traced(model, &data, &start, &opts).unwrap();
        let mut dense = start.clone();
        for it in trace.iter().skip(1) {
            dense = dense_newton_step(model, &data, &dense);
            assert!(sup_dist(it, &dense) < 1e-9, "seed {s}");
        }
    }
}

#[test]
fn fit_is_bit_deterministic() {
    let eta: Vec<f64> = (0..60).map(|i| (i as f64 - 30.0) / 10.0).collect();
    let data = dynamic_logit::simulate(0.5, &eta, 8, InitialCondition::Stationary, &mut StreamKey::new(77).rng()).unwrap();
    let start = DynamicLogitModel.default_start(&data);
    let a = fit_traced(&DynamicLogitModel, &data, &start, &FitOptions::default()).unwrap();
    let b = fit_traced(&DynamicLogitModel, &data, &start, &FitOptions::default()).unwrap();
    assert!(!a.0.dropped_strata.is_empty());
    // Dropped strata hold NaN, so compare bit patterns through Debug.
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn many_strata_fit_without_dense_storage() {
    // A dense Hessian here would need (1 + 200_000)^2 doubles.
    let n = 200_000;
    let eta: Vec<f64> = (0..n).map(|i| (i % 17) as f64 / 17.0).collect();
    let data = normal_means::simulate(1.0, &eta, 3, &mut StreamKey::new(5).rng()).unwrap();
    let f = fit(&NormalMeansModel, &data, &NormalMeansModel.default_start(&data), &FitOptions::default()).unwrap();
    assert!(f.converged);
    assert!((f.theta.phi[0] - normal_means::closed_form_mle(&data).unwrap().phi[0]).abs() < 1e-10);
}

#[test]
fn logit_hessian_blocks_are_negative_semidefinite() {
    let mut rng = StreamKey::new(41).rng();
    let (data, _) = random_instance(ModelKind::DynamicLogit, StreamKey::new(42));
    for _ in 0..1000 {
        let phi = vec![3.0 * normal(&mut rng)];
        let eta: Vec<f64> = (0..data.n()).map(|_| 3.0 * normal(&mut rng)).collect();
        let theta = ParameterPoint::new(phi, eta, 1).unwrap();
        let (_, h) = dense_score_hessian(&DynamicLogitModel, &data, &theta);
        let max_eig = h.symmetric_eigenvalues().max();
        assert!(max_eig <= 1e-12, "{max_eig}");
    }
}

#[test]
fn normal_closed_form_is_a_maximum() {
    let mut rng = StreamKey::new(43).rng();
    let eta: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let data = normal_means::simulate(1.5, &eta, 5, &mut rng).unwrap();
    let cf = normal_means::closed_form_mle(&data).unwrap();
    let best = total_loglik(&NormalMeansModel, &data, &cf).unwrap();
    for _ in 0..1000 {
        let mut t = cf.clone();
        t.phi[0] *= (0.3 * normal(&mut rng)).exp();
        for e in &mut t.eta {
            *e += 0.3 * normal(&mut rng);
        }
        assert!(total_loglik(&NormalMeansModel, &data, &t).unwrap() <= best);
    }
}

#[test]
fn logit_transition_frequency_matches_cdf() {
    let mut rng = StreamKey::new(44).rng();
    let (phi, eta) = (0.8, -0.3);
    for lag in [0.0, 1.0] {
        let p = dynamic_logit::logistic_cdf(eta + phi * lag);
        let draws = 100_000;
        let mut ones = 0usize;
        let mut out = [0.0];
        for _ in 0..draws {
            DynamicLogitModel.sample_transition(&[phi], &[eta], &[lag], &[], &mut rng, &mut out);
            ones += (out[0] == 1.0) as usize;
        }
        let freq = ones as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "lag {lag}: {freq} vs {p}");
    }
}

#[test]
fn score_vanishes_at_the_fit() {
    let (data, start) = random_instance(ModelKind::DynamicLogit, StreamKey::new(45));
    let f = fit(&DynamicLogitModel, &data, &start, &FitOptions::default()).unwrap();
    let b = assemble(&DynamicLogitModel, &data, &f.retained_theta()).unwrap();
    assert!(b.score_norm() <= 1e-8 * data.nm() as f64);
}
