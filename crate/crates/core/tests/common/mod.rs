#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use panelboot::models::{dynamic_logit, normal_means, InitialCondition};
use panelboot::panel::ObsDerivatives;
use panelboot::{ModelKind, PanelDataset, PanelModel, ParameterPoint, StreamKey};

/// Full gradient and Hessian over `(phi, eta_1, ..., eta_n)`, summed directly
/// from the per-observation derivatives into dense arrays.
pub fn dense_score_hessian(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
) -> (DVector<f64>, DMatrix<f64>) {
    let dims = model.dims();
    let (dp, de, n) = (dims.dim_phi, dims.dim_eta, data.n());
    let k = dp + n * de;
    let mut g = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    let mut obs = ObsDerivatives::new(dims);
    for i in 0..n {
        let off = dp + i * de;
        for t in 1..=data.m() {
            let z = data.z(i, t).unwrap();
            model.derivatives(&theta.phi, theta.eta_i(i), &z, &mut obs);
            for a in 0..dp {
                g[a] += obs.d_phi[a];
                for b in 0..dp {
                    h[(a, b)] += obs.h_phiphi[a * dp + b];
                }
                for b in 0..de {
                    h[(a, off + b)] += obs.h_phieta[a * de + b];
                    h[(off + b, a)] += obs.h_phieta[a * de + b];
                }
            }
            for a in 0..de {
                g[off + a] += obs.d_eta[a];
                for b in 0..de {
                    h[(off + a, off + b)] += obs.h_etaeta[a * de + b];
                }
            }
        }
    }
    (g, h)
}

/// One undamped Newton step using a dense LU solve of the full Hessian.
pub fn dense_newton_step(model: &dyn PanelModel, data: &PanelDataset, theta: &ParameterPoint) -> ParameterPoint {
    let (g, h) = dense_score_hessian(model, data, theta);
    let d = h.lu().solve(&(-g)).expect("dense Hessian is nonsingular");
    let flat: Vec<f64> = theta.flatten().iter().zip(d.iter()).map(|(a, b)| a + b).collect();
    ParameterPoint::unflatten(&flat, theta.dim_phi(), theta.dim_eta).unwrap()
}

/// One undamped Newton step through the partitioned solver.
pub fn partitioned_newton_step(model: &dyn PanelModel, data: &PanelDataset, theta: &ParameterPoint) -> ParameterPoint {
    let b = panelboot::newton::assemble(model, data, theta).unwrap();
    let s = panelboot::newton::newton_direction(&b).unwrap();
    let mut next = theta.clone();
    for (v, d) in next.phi.iter_mut().zip(&s.d_phi) {
        *v += d;
    }
    for (v, d) in next.eta.iter_mut().zip(&s.d_eta) {
        *v += d;
    }
    next
}

pub fn sup_dist(a: &ParameterPoint, b: &ParameterPoint) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A small random panel whose strata are all admissible, with a start close
/// to (but not at) the maximum.
pub fn random_instance(kind: ModelKind, key: StreamKey) -> (PanelDataset, ParameterPoint) {
    let mut rng = key.rng();
    let n = rng.random_range(1..=5);
    loop {
        let m = rng.random_range(6..=12);
        let eta: Vec<f64> = (0..n).map(|_| 0.5 * normal(&mut rng)).collect();
        let data = match kind {
            ModelKind::NormalMeans => {
                let phi0 = rng.random_range(0.3..3.0);
                normal_means::simulate(phi0, &eta, m, &mut rng).unwrap()
            }
            ModelKind::DynamicLogit => {
                let phi0 = rng.random_range(-1.0..1.5);
                dynamic_logit::simulate(phi0, &eta, m, InitialCondition::Stationary, &mut rng).unwrap()
            }
        };
        let model = kind.model();
        if (0..n).any(|i| !model.stratum_admissible(&data, i)) {
            continue;
        }
        let start = match kind {
            ModelKind::NormalMeans => {
                let mut t = normal_means::closed_form_mle(&data).unwrap();
                t.phi[0] *= 1.0 + 0.05 * rng.random_range(-1.0..1.0);
                for e in &mut t.eta {
                    *e += 0.05 * normal(&mut rng);
                }
                t
            }
            ModelKind::DynamicLogit => {
                let mut t = ParameterPoint::zeros(1, 1, n);
                t.phi[0] = 0.3 * normal(&mut rng);
                for e in &mut t.eta {
                    *e = 0.3 * normal(&mut rng);
                }
                t
            }
        };
        return (data, start);
    }
}

/// Largest discrepancy between partitioned and dense Newton iterates over
/// `steps` undamped iterations, each route iterated on its own.
pub fn newton_route_gap(kind: ModelKind, key: StreamKey, steps: usize) -> f64 {
    let model = kind.model();
    let (data, start) = random_instance(kind, key);
    let (mut a, mut b) = (start.clone(), start);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        a = partitioned_newton_step(model, &data, &a);
        b = dense_newton_step(model, &data, &b);
        let scale = a.flatten().iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        worst = worst.max(sup_dist(&a, &b) / scale);
    }
    worst
}

/// Random single-stratum point for derivative checks; period 1 is the
/// observation under test.
pub fn random_point(kind: ModelKind, rng: &mut impl Rng) -> (PanelDataset, Vec<f64>, Vec<f64>) {
    match kind {
        ModelKind::NormalMeans => {
            let z = 3.0 * normal(rng);
            let data = PanelDataset::new(1, 2, 0, 1, 0, &[], &[z, 0.0], &[]).unwrap();
            (data, vec![rng.random_range(0.2..5.0)], vec![2.0 * normal(rng)])
        }
        ModelKind::DynamicLogit => {
            let lag = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let data = PanelDataset::new(1, 2, 1, 1, 0, &[lag], &[y, 0.0], &[]).unwrap();
            (data, vec![2.0 * normal(rng)], vec![2.0 * normal(rng)])
        }
    }
}

pub struct FdErrors {
    pub score: f64,
    pub hessian: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Central differences of the log-density (for the score) and of the
/// analytic score (for the Hessian), step `1e-6 max(1, |coord|)`.
pub fn fd_errors(model: &dyn PanelModel, data: &PanelDataset, phi: &[f64], eta: &[f64]) -> FdErrors {
    let z = data.z(0, 1).unwrap();
    let dims = model.dims();
    let mut d = ObsDerivatives::new(dims);
    model.derivatives(phi, eta, &z, &mut d);
    let theta: Vec<f64> = phi.iter().chain(eta).copied().collect();
    let dp = phi.len();
    let split = |v: &[f64]| (v[..dp].to_vec(), v[dp..].to_vec());
    let score_at = |v: &[f64]| {
        let (p, e) = split(v);
        let mut o = ObsDerivatives::new(dims);
        model.derivatives(&p, &e, &z, &mut o);
        o.d_phi.iter().chain(&o.d_eta).copied().collect::<Vec<f64>>()
    };
    let analytic_score: Vec<f64> = d.d_phi.iter().chain(&d.d_eta).copied().collect();
    let k = theta.len();
    let mut hess = vec![vec![0.0; k]; k];
    for a in 0..dp {
        for b in 0..dp {
            hess[a][b] = d.h_phiphi[a * dp + b];
        }
        for b in 0..eta.len() {
            hess[a][dp + b] = d.h_phieta[a * eta.len() + b];
            hess[dp + b][a] = d.h_phieta[a * eta.len() + b];
        }
    }
    for a in 0..eta.len() {
        for b in 0..eta.len() {
            hess[dp + a][dp + b] = d.h_etaeta[a * eta.len() + b];
        }
    }
    let (mut es, mut eh) = (0.0_f64, 0.0_f64);
    for j in 0..k {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += h;
        dn[j] -= h;
        let (pu, eu) = split(&up);
        let (pd, ed) = split(&dn);
        let fd = (model.loglik(&pu, &eu, &z) - model.loglik(&pd, &ed, &z)) / (2.0 * h);
        es = es.max(rel(analytic_score[j], fd));
        let su = score_at(&up);
        let sd = score_at(&dn);
        for r in 0..k {
            eh = eh.max(rel(hess[r][j], (su[r] - sd[r]) / (2.0 * h)));
        }
    }
    FdErrors { score: es, hessian: eh }
}
