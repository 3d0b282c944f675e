mod common;

use common::*;
use panelboot::{ModelKind, StreamKey};

fn check(kind: ModelKind, seed: u64) {
    let mut rng = StreamKey::new(seed).rng();
    for _ in 0..100 {
        let (data, phi, eta) = random_point(kind, &mut rng);
        let e = fd_errors(kind.model(), &data, &phi, &eta);
        assert!(e.score < 1e-6, "{kind}: score error {}", e.score);
        assert!(e.hessian < 1e-5, "{kind}: hessian error {}", e.hessian);
    }
}

#[test]
fn normal_means_derivatives_match_finite_differences() {
    check(ModelKind::NormalMeans, 1);
}

#[test]
fn dynamic_logit_derivatives_match_finite_differences() {
    check(ModelKind::DynamicLogit, 2);
}

#[test]
fn logit_derivatives_stay_finite_far_out() {
    let mut rng = StreamKey::new(3).rng();
    for _ in 0..100 {
        let (data, _, _) = random_point(ModelKind::DynamicLogit, &mut rng);
        let big = 300.0 * normal(&mut rng);
        let mut d = panelboot::panel::ObsDerivatives::new(ModelKind::DynamicLogit.model().dims());
        ModelKind::DynamicLogit.model().derivatives(&[1.0], &[big], &data.z(0, 1).unwrap(), &mut d);
        assert!(d.is_finite());
    }
}
