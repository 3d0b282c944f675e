//! Many normal means: `z_it ~ N(eta_i, phi)` with a common variance `phi`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::ModelError;
use crate::panel::{
    ModelDims, ObsDerivatives, PanelDataset, PanelModel, ParameterPoint, ZTuple,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Variance parametrized directly as `phi > 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalMeansModel;

impl PanelModel for NormalMeansModel {
    fn name(&self) -> &'static str {
        "normal-means"
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            dim_phi: 1,
            dim_eta: 1,
            dim_y: 1,
            dim_x: 0,
            lags: 0,
        }
    }

    #[inline]
    fn loglik(&self, phi: &[f64], eta: &[f64], z: &ZTuple<'_>) -> f64 {
        let v = phi[0];
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let r = z.y()[0] - eta[0];
        -HALF_LN_2PI - 0.5 * v.ln() - r * r / (2.0 * v)
    }

    #[inline]
    fn derivatives(&self, phi: &[f64], eta: &[f64], z: &ZTuple<'_>, out: &mut ObsDerivatives) {
        let v = phi[0];
        let r = z.y()[0] - eta[0];
        let r2 = r * r;
        if v <= 0.0 {
            out.value = f64::NEG_INFINITY;
            return;
        }
        let inv = 1.0 / v;
        out.value = -HALF_LN_2PI - 0.5 * v.ln() - 0.5 * r2 * inv;
        out.d_phi[0] = -0.5 * inv + 0.5 * r2 * inv * inv;
        out.d_eta[0] = r * inv;
        out.h_phiphi[0] = 0.5 * inv * inv - r2 * inv * inv * inv;
        out.h_phieta[0] = -r * inv * inv;
        out.h_etaeta[0] = -inv;
    }

    fn sample_transition(
        &self,
        phi: &[f64],
        eta: &[f64],
        _history: &[f64],
        _x: &[f64],
        rng: &mut dyn RngCore,
        out: &mut [f64],
    ) {
        let e: f64 = StandardNormal.sample(rng);
        out[0] = eta[0] + phi[0].sqrt() * e;
    }

    fn phi_admissible(&self, phi: &[f64]) -> bool {
        phi[0] > 0.0 && phi[0].is_finite()
    }

    fn effects_can_diverge(&self) -> bool {
        false
    }

    fn default_start(&self, data: &PanelDataset) -> ParameterPoint {
        let mut ss = 0.0;
        for i in 0..data.n() {
            ss += data.outcomes(i).iter().map(|z| z * z).sum::<f64>();
        }
        let phi = (ss / data.nm() as f64).max(1.0);
        ParameterPoint {
            phi: vec![phi],
            eta: vec![0.0; data.n()],
            dim_eta: 1,
        }
    }
}

/// Within-stratum means and the pooled within variance
/// `phi_hat = (1/nm) sum_i sum_t (z_it - zbar_i)^2`.
pub fn closed_form_mle(data: &PanelDataset) -> Result<ParameterPoint, ModelError> {
    if data.m() < 2 {
        return Err(ModelError::Invalid("need m >= 2".into()));
    }
    let mut eta = Vec::with_capacity(data.n());
    let mut ss = 0.0;
    for i in 0..data.n() {
        let z = data.outcomes(i);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        ss += z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        eta.push(mean);
    }
    let phi = ss / data.nm() as f64;
    if phi <= 0.0 {
        return Err(ModelError::Degenerate(
            "outcomes are constant within every stratum, variance estimate is zero".into(),
        ));
    }
    Ok(ParameterPoint {
        phi: vec![phi],
        eta,
        dim_eta: 1,
    })
}

/// First-order bias correction `phi_hat + phi_hat / m`.
pub fn bias_corrected(phi_hat: f64, m: usize) -> f64 {
    phi_hat + phi_hat / m as f64
}

/// Draws `z_it = eta_i + sqrt(phi0) e_it` stratum-major, time-minor.
pub fn simulate(
    phi0: f64,
    eta0: &[f64],
    m: usize,
    rng: &mut dyn RngCore,
) -> Result<PanelDataset, ModelError> {
    if !(phi0 > 0.0 && phi0.is_finite()) {
        return Err(ModelError::Invalid(format!("variance must be positive, got {phi0}")));
    }
    let sd = phi0.sqrt();
    let mut y = Vec::with_capacity(eta0.len() * m);
    for &eta in eta0 {
        for _ in 0..m {
            let e: f64 = StandardNormal.sample(rng);
            y.push(eta + sd * e);
        }
    }
    Ok(PanelDataset::new(eta0.len(), m, 0, 1, 0, &[], &y, &[])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::total_loglik;
    use crate::rng::StreamKey;

    fn data(z: &[&[f64]]) -> PanelDataset {
        let m = z[0].len();
        let y: Vec<f64> = z.iter().flat_map(|s| s.iter().copied()).collect();
        PanelDataset::new(z.len(), m, 0, 1, 0, &[], &y, &[]).unwrap()
    }

    #[test]
    fn loglik_at_zero_residuals() {
        let d = data(&[&[1.0, 1.0, 1.0], &[-2.0, -2.0, -2.0]]);
        let theta = ParameterPoint::new(vec![1.0], vec![1.0, -2.0], 1).unwrap();
        let ll = total_loglik(&NormalMeansModel, &d, &theta).unwrap();
        assert!((ll + 6.0 * HALF_LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn loglik_two_point_stratum_by_hand() {
        // -ln(2 pi) - 1 for z = (0, 2), eta = 1, phi = 1
        let d = data(&[&[0.0, 2.0]]);
        let theta = ParameterPoint::new(vec![1.0], vec![1.0], 1).unwrap();
        let ll = total_loglik(&NormalMeansModel, &d, &theta).unwrap();
        let expect = -(2.0 * std::f64::consts::PI).ln() - 1.0;
        assert!((ll - expect).abs() < 1e-14);
    }

    #[test]
    fn closed_form_two_point_stratum() {
        let theta = closed_form_mle(&data(&[&[0.0, 2.0]])).unwrap();
        assert_eq!(theta.eta, vec![1.0]);
        assert_eq!(theta.phi, vec![1.0]);
    }

    #[test]
    fn closed_form_rejects_constant_strata() {
        let err = closed_form_mle(&data(&[&[3.0, 3.0], &[1.0, 1.0]]));
        assert!(matches!(err, Err(ModelError::Degenerate(_))));
    }

    #[test]
    fn non_positive_variance_is_non_finite() {
        let d = data(&[&[0.0, 2.0]]);
        let theta = ParameterPoint::new(vec![0.0], vec![1.0], 1).unwrap();
        assert!(total_loglik(&NormalMeansModel, &d, &theta).is_err());
    }

    #[test]
    fn bias_correction_formula() {
        assert!((bias_corrected(1.0, 10) - 1.1).abs() < 1e-15);
        assert_eq!(bias_corrected(0.0, 7), 0.0);
    }

    #[test]
    fn simulation_is_seeded() {
        let eta: Vec<f64> = (1..=5).map(|i| i as f64 / 5.0).collect();
        let a = simulate(2.0, &eta, 4, &mut StreamKey::new(9).rng()).unwrap();
        let b = simulate(2.0, &eta, 4, &mut StreamKey::new(9).rng()).unwrap();
        let c = simulate(2.0, &eta, 4, &mut StreamKey::new(10).rng()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
