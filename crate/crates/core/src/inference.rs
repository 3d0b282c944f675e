//! Plug-in variance of the common parameter, studentized and quadratic-form
//! statistics, and plug-in average effects.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::newton::{assemble, FitError, FitResult};
use crate::panel::{check_dims, PanelDataset, PanelError, PanelModel, ParameterPoint, ZTuple};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("variance matrix is not positive definite (smallest eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },
    #[error("contrast is zero")]
    ZeroContrast,
    #[error("contrast matrix is rank deficient")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("average effect is not finite at stratum {stratum}, period {period}")]
    NonFiniteEffect { stratum: usize, period: usize },
    #[error("fit did not converge")]
    NotConverged,
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Plug-in asymptotic variance of `sqrt(nm) (phi_hat - phi_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaHat {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
    /// Per retained stratum `rho_i` (`dim_phi x dim_eta`, row-major); empty
    /// when built from the profile matrix alone.
    pub rho: Vec<f64>,
    pub nm: usize,
    pub min_eigenvalue: f64,
    pub condition: f64,
}

impl SigmaHat {
    /// `Sigma = -nm P^{-1}` for the profile matrix `P` (row-major).
    pub fn from_profile(profile: &[f64], dim: usize, nm: usize) -> Result<Self, InferenceError> {
        if profile.len() != dim * dim {
            return Err(InferenceError::Dimension(format!(
                "profile has {} entries, expected {}",
                profile.len(),
                dim * dim
            )));
        }
        let neg = DMatrix::from_row_slice(dim, dim, profile) * (-1.0 / nm as f64);
        let (inv, _, _) = spd_inverse(&neg)?;
        let sigma = inv;
        let (lo, hi) = eigen_range(&sigma)?;
        Ok(Self {
            dim,
            matrix: row_major(&sigma),
            rho: Vec::new(),
            nm,
            min_eigenvalue: lo,
            condition: hi / lo,
        })
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.matrix)
    }

    /// `c' Sigma c`.
    pub fn quadratic(&self, c: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.dim {
            for k in 0..self.dim {
                acc += c[r] * self.matrix[r * self.dim + k] * c[k];
            }
        }
        acc
    }

    /// Standard error of `c' phi_hat`, i.e. `sqrt(c' Sigma c / nm)`.
    pub fn standard_error(&self, c: &[f64]) -> f64 {
        (self.quadratic(c) / self.nm as f64).sqrt()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn eigen_range(m: &DMatrix<f64>) -> Result<(f64, f64), InferenceError> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if !(v > 0.0 && v.is_finite()) {
            return Err(InferenceError::NotPositiveDefinite { eigenvalue: v });
        }
        return Ok((v, v));
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(InferenceError::NotPositiveDefinite { eigenvalue: lo });
    }
    Ok((lo, hi))
}

/// Inverse of a symmetric positive definite matrix with its eigenvalue range.
fn spd_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, f64), InferenceError> {
    let (lo, hi) = eigen_range(m)?;
    if m.nrows() == 1 {
        return Ok((DMatrix::from_element(1, 1, 1.0 / m[(0, 0)]), lo, hi));
    }
    let sym = 0.5 * (m + m.transpose());
    let chol = sym
        .cholesky()
        .ok_or(InferenceError::NotPositiveDefinite { eigenvalue: lo })?;
    Ok((chol.inverse(), lo, hi))
}

/// `rho_i = (sum_t l_phi_eta)(sum_t l_eta_eta)^{-1}` per stratum and
/// `Sigma = -[(nm)^{-1} sum_i sum_t (l_phi_phi - rho_i l_eta_phi)]^{-1}`
/// at `theta_hat`. The data and estimate must already be restricted to the
/// retained strata.
pub fn sigma_hat(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta_hat: &ParameterPoint,
) -> Result<SigmaHat, InferenceError> {
    check_dims(model, data, theta_hat)?;
    let b = assemble(model, data, theta_hat)?;
    let (dp, de) = (b.dim_phi, b.dim_eta);
    let mut info = DMatrix::from_row_slice(dp, dp, &b.h_phiphi);
    let mut rho = Vec::with_capacity(b.n * dp * de);
    for i in 0..b.n {
        let hee = DMatrix::from_row_slice(de, de, b.h_etaeta_i(i));
        let hpe = DMatrix::from_row_slice(dp, de, b.h_phieta_i(i));
        let hee_inv = hee.try_inverse().ok_or(FitError::SingularStrata(vec![i]))?;
        let rho_i = &hpe * hee_inv;
        info -= &rho_i * hpe.transpose();
        rho.extend(row_major(&rho_i));
    }
    let nm = data.nm();
    let avg = info * (-1.0 / nm as f64);
    let avg = 0.5 * (&avg + avg.transpose());
    let (sigma, _, _) = spd_inverse(&avg)?;
    let (lo, hi) = eigen_range(&sigma)?;
    Ok(SigmaHat {
        dim: dp,
        matrix: row_major(&sigma),
        rho,
        nm,
        min_eigenvalue: lo,
        condition: hi / lo,
    })
}

/// [`sigma_hat`] on the strata retained by `fit`.
pub fn sigma_hat_for_fit(
    model: &dyn PanelModel,
    data: &PanelDataset,
    fit: &FitResult,
) -> Result<SigmaHat, InferenceError> {
    if !fit.converged {
        return Err(InferenceError::NotConverged);
    }
    let sub = data.subset(&fit.retained_strata);
    sigma_hat(model, &sub, &fit.retained_theta())
}

/// `sqrt(nm) c'(estimate - reference) / sqrt(c' Sigma c)`.
pub fn studentize(
    estimate: &[f64],
    reference: &[f64],
    sigma: &SigmaHat,
    c: &[f64],
    nm: usize,
) -> Result<f64, InferenceError> {
    if c.len() != sigma.dim || estimate.len() != sigma.dim || reference.len() != sigma.dim {
        return Err(InferenceError::Dimension("contrast or estimate length differs from Sigma".into()));
    }
    if c.iter().all(|v| *v == 0.0) {
        return Err(InferenceError::ZeroContrast);
    }
    let q = sigma.quadratic(c);
    if !(q > 0.0) {
        return Err(InferenceError::NotPositiveDefinite { eigenvalue: q });
    }
    let diff: f64 = c.iter().zip(estimate.iter().zip(reference)).map(|(c, (e, r))| c * (e - r)).sum();
    Ok((nm as f64).sqrt() * diff / q.sqrt())
}

/// `nm (est - ref)' C (C' Sigma C)^{-1} C' (est - ref)` for a
/// `dim_phi x k` contrast matrix `C`.
pub fn wald_quadratic(
    estimate: &[f64],
    reference: &[f64],
    sigma: &SigmaHat,
    contrasts: &DMatrix<f64>,
    nm: usize,
) -> Result<f64, InferenceError> {
    let d = sigma.dim;
    if contrasts.nrows() != d || estimate.len() != d || reference.len() != d {
        return Err(InferenceError::Dimension("contrast matrix rows differ from dim_phi".into()));
    }
    let k = contrasts.ncols();
    if k == 0 || k > d || contrasts.clone().svd(false, false).rank(1e-12 * contrasts.norm()) < k {
        return Err(InferenceError::RankDeficient);
    }
    let middle = contrasts.transpose() * sigma.as_matrix() * contrasts;
    let (inv, _, _) = spd_inverse(&middle)?;
    let diff = DVector::from_iterator(d, estimate.iter().zip(reference).map(|(e, r)| e - r));
    let proj = contrasts.transpose() * diff;
    let q = (proj.transpose() * inv * &proj)[(0, 0)];
    Ok(nm as f64 * q.max(0.0))
}

/// A function `mu(z_it, phi, eta_i)` whose panel average is the target
/// `Delta`.
pub trait AverageEffect: Send + Sync {
    fn name(&self) -> &str;

    fn mu(&self, z: &ZTuple<'_>, phi: &[f64], eta: &[f64]) -> f64;

    /// A plug-in standard error for `Delta_hat`, if the effect knows one for
    /// the model at hand. Used to studentize bootstrap replicates.
    fn plug_in_se(&self, _data: &PanelDataset, _theta: &ParameterPoint, _delta: f64) -> Option<f64> {
        None
    }
}

/// `mu = eta' eta`, the second moment of the effects.
#[derive(Debug, Clone, Copy, Default)]
pub struct SecondMoment;

impl AverageEffect for SecondMoment {
    fn name(&self) -> &str {
        "second-moment"
    }

    fn mu(&self, _z: &ZTuple<'_>, _phi: &[f64], eta: &[f64]) -> f64 {
        eta.iter().map(|e| e * e).sum()
    }
}

/// Second moment of the means in the normal-means model. Its plug-in
/// standard error is the leading term `sqrt(4 phi Delta / nm)` of the exact
/// variance of the average squared stratum mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalSecondMoment;

impl AverageEffect for NormalSecondMoment {
    fn name(&self) -> &str {
        "second-moment"
    }

    fn mu(&self, z: &ZTuple<'_>, phi: &[f64], eta: &[f64]) -> f64 {
        SecondMoment.mu(z, phi, eta)
    }

    fn plug_in_se(&self, data: &PanelDataset, theta: &ParameterPoint, delta: f64) -> Option<f64> {
        let v = 4.0 * theta.phi[0] * delta / data.nm() as f64;
        (v > 0.0 && v.is_finite()).then(|| v.sqrt())
    }
}

/// `mu = eta_1`, the mean of the first effect coordinate.
#[derive(Debug, Clone, Copy, Default)]
pub struct EffectMean;

impl AverageEffect for EffectMean {
    fn name(&self) -> &str {
        "mean"
    }

    fn mu(&self, _z: &ZTuple<'_>, _phi: &[f64], eta: &[f64]) -> f64 {
        eta[0]
    }
}

/// `mu` built from a closure.
pub struct FnEffect<F> {
    name: String,
    f: F,
}

impl<F> FnEffect<F>
where
    F: Fn(&ZTuple<'_>, &[f64], &[f64]) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> AverageEffect for FnEffect<F>
where
    F: Fn(&ZTuple<'_>, &[f64], &[f64]) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn mu(&self, z: &ZTuple<'_>, phi: &[f64], eta: &[f64]) -> f64 {
        (self.f)(z, phi, eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageEffectEstimate {
    pub value: f64,
    /// Time average of `mu` within each stratum.
    pub contributions: Vec<f64>,
}

/// `(1/nm) sum_i sum_t mu(z_it, phi_hat, eta_hat_i)`.
pub fn delta_hat(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta_hat: &ParameterPoint,
    effect: &dyn AverageEffect,
) -> Result<AverageEffectEstimate, InferenceError> {
    check_dims(model, data, theta_hat)?;
    let m = data.m();
    let mut contributions = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let mut s = 0.0;
        for t in 1..=m {
            let v = effect.mu(&data.z_unchecked(i, t), &theta_hat.phi, theta_hat.eta_i(i));
            if !v.is_finite() {
                return Err(InferenceError::NonFiniteEffect { stratum: i, period: t });
            }
            s += v;
        }
        contributions.push(s / m as f64);
    }
    let value = contributions.iter().sum::<f64>() / contributions.len() as f64;
    Ok(AverageEffectEstimate { value, contributions })
}
