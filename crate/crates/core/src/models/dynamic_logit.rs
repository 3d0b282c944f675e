//! First-order dynamic logit: `y_it = 1{eta_i + phi y_it-1 > e_it}` with
//! standard logistic errors.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::panel::{ModelDims, ObsDerivatives, PanelDataset, PanelModel, ZTuple};

#[derive(Debug, Clone, Copy, Default)]
pub struct DynamicLogitModel;

/// Logistic CDF `F(a) = 1 / (1 + exp(-a))`.
#[inline]
pub fn logistic_cdf(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(a))` without overflow.
#[inline]
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

impl PanelModel for DynamicLogitModel {
    fn name(&self) -> &'static str {
        "dynamic-logit"
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            dim_phi: 1,
            dim_eta: 1,
            dim_y: 1,
            dim_x: 0,
            lags: 1,
        }
    }

    #[inline]
    fn loglik(&self, phi: &[f64], eta: &[f64], z: &ZTuple<'_>) -> f64 {
        let a = eta[0] + phi[0] * z.lag(1)[0];
        z.y()[0] * a - softplus(a)
    }

    #[inline]
    fn derivatives(&self, phi: &[f64], eta: &[f64], z: &ZTuple<'_>, out: &mut ObsDerivatives) {
        let lag = z.lag(1)[0];
        let y = z.y()[0];
        let a = eta[0] + phi[0] * lag;
        let f = logistic_cdf(a);
        let g = y - f;
        let w = -f * (1.0 - f);
        out.value = y * a - softplus(a);
        out.d_phi[0] = g * lag;
        out.d_eta[0] = g;
        out.h_phiphi[0] = w * lag * lag;
        out.h_phieta[0] = w * lag;
        out.h_etaeta[0] = w;
    }

    fn sample_transition(
        &self,
        phi: &[f64],
        eta: &[f64],
        history: &[f64],
        _x: &[f64],
        rng: &mut dyn RngCore,
        out: &mut [f64],
    ) {
        let a = eta[0] + phi[0] * history[0];
        out[0] = bernoulli(logistic_cdf(a), rng);
    }

    /// Inadmissible iff the sample outcomes are all 0 or all 1, in which case
    /// the stratum likelihood is monotone in `eta_i`.
    fn stratum_admissible(&self, data: &PanelDataset, i: usize) -> bool {
        let y = data.outcomes(i);
        let first = y[0];
        y.iter().any(|&v| v != first)
    }
}

/// Inverse-CDF draw on a single uniform.
#[inline]
fn bernoulli(p: f64, rng: &mut dyn RngCore) -> f64 {
    let u: f64 = rng.random();
    if u < p {
        1.0
    } else {
        0.0
    }
}

/// Stationary `P(y = 1) = F(eta) / (1 - F(eta + phi) + F(eta))`.
pub fn stationary_probability(eta: f64, phi: f64) -> f64 {
    let f0 = logistic_cdf(eta);
    let f1 = logistic_cdf(eta + phi);
    f0 / (1.0 - f1 + f0)
}

/// How the pre-sample outcome `y_i0` is generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCondition {
    /// Drawn from the stationary distribution of the chain.
    Stationary,
    /// The same fixed value for every stratum.
    Fixed(f64),
}

/// Simulates `m` periods for each entry of `eta0`. For every stratum the
/// initial outcome (when stationary) is drawn first, then `y_i1..y_im`.
pub fn simulate(
    phi0: f64,
    eta0: &[f64],
    m: usize,
    init: InitialCondition,
    rng: &mut dyn RngCore,
) -> Result<PanelDataset, ModelError> {
    if !phi0.is_finite() || eta0.iter().any(|e| !e.is_finite()) {
        return Err(ModelError::Invalid("parameters must be finite".into()));
    }
    let n = eta0.len();
    let mut y_pre = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n * m);
    for &eta in eta0 {
        let mut prev = match init {
            InitialCondition::Stationary => bernoulli(stationary_probability(eta, phi0), rng),
            InitialCondition::Fixed(v) => v,
        };
        y_pre.push(prev);
        for _ in 0..m {
            let cur = bernoulli(logistic_cdf(eta + phi0 * prev), rng);
            y.push(cur);
            prev = cur;
        }
    }
    Ok(PanelDataset::new(n, m, 1, 1, 0, &y_pre, &y, &[])?)
}
