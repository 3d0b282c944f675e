mod common;

use common::normal;
use nalgebra::DMatrix;
use panelboot::inference::{sigma_hat_for_fit, studentize, wald_quadratic};
use panelboot::models::{normal_means, NormalMeansModel};
use panelboot::{fit, FitOptions, PanelModel, StreamKey};
use proptest::prelude::*;
use rand::Rng;

fn normal_fit(seed: u64, n: usize, m: usize, phi0: f64) -> (panelboot::PanelDataset, panelboot::FitResult) {
    let mut rng = StreamKey::new(seed).rng();
    let eta: Vec<f64> = (0..n).map(|_| 2.0 * normal(&mut rng)).collect();
    let data = normal_means::simulate(phi0, &eta, m, &mut rng).unwrap();
    let f = fit(&NormalMeansModel, &data, &NormalMeansModel.default_start(&data), &FitOptions::default()).unwrap();
    (data, f)
}

proptest! {
    #[test]
    fn sigma_hat_is_twice_phi_hat_squared(seed in any::<u64>(), n in 1usize..60, m in 2usize..20, phi0 in 0.05f64..20.0) {
        let (data, f) = normal_fit(seed, n, m, phi0);
        let s = sigma_hat_for_fit(&NormalMeansModel, &data, &f).unwrap();
        let phi = f.theta.phi[0];
        prop_assert!((s.matrix[0] - 2.0 * phi * phi).abs() <= 1e-12 * 2.0 * phi * phi);
    }

    #[test]
    fn scalar_wald_is_squared_studentized(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let (data, f) = normal_fit(seed, 12, 5, 1.0);
        let s = sigma_hat_for_fit(&NormalMeansModel, &data, &f).unwrap();
        let reference = [f.theta.phi[0] + shift];
        let t = studentize(&f.theta.phi, &reference, &s, &[1.0], data.nm()).unwrap();
        let w = wald_quadratic(&f.theta.phi, &reference, &s, &DMatrix::identity(1, 1), data.nm()).unwrap();
        prop_assert!((w - t * t).abs() <= 1e-12 * w.max(1.0));
    }
}

#[test]
fn sigma_hat_is_consistent_for_large_panels() {
    let mut dev: Vec<f64> = (0..200)
        .map(|r| {
            let (data, f) = normal_fit(1000 + r, 200, 200, 1.0);
            let s = sigma_hat_for_fit(&NormalMeansModel, &data, &f).unwrap();
            (s.matrix[0] - 2.0).abs()
        })
        .collect();
    dev.sort_by(f64::total_cmp);
    assert!(dev[100] < 0.05 * 2.0, "median deviation {}", dev[100]);
}

#[test]
fn standard_error_scales_with_panel_size() {
    let mut rng = StreamKey::new(9).rng();
    let eta: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = normal_means::simulate(1.0, &eta, 8, &mut rng).unwrap();
    let f = fit(&NormalMeansModel, &data, &NormalMeansModel.default_start(&data), &FitOptions::default()).unwrap();
    let s = sigma_hat_for_fit(&NormalMeansModel, &data, &f).unwrap();
    let phi = f.theta.phi[0];
    let expect = (2.0 * phi * phi / data.nm() as f64).sqrt();
    assert!((s.standard_error(&[1.0]) - expect).abs() < 1e-14);
    assert_eq!(NormalMeansModel.dims().dim_phi, 1);
}
