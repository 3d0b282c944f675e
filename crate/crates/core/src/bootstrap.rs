//! Parametric bootstrap: resampling from the fitted transition density,
//! refitting, and confidence sets for the common parameter and for average
//! effects.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{delta_hat, wald_quadratic, AverageEffect, InferenceError, SigmaHat};
use crate::newton::{fit, FitOptions, FitResult};
use crate::panel::{check_dims, PanelDataset, PanelError, PanelModel, ParameterPoint};
use crate::rng::StreamKey;

/// Smallest replicate count accepted by the interval constructors.
pub const MIN_REPLICATES: usize = 39;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("{failures} of {requested} bootstrap replicates failed ({reasons:?})")]
    FailureCeiling {
        failures: usize,
        requested: usize,
        reasons: BTreeMap<String, usize>,
    },
    #[error("no bootstrap draws")]
    Empty,
    #[error("quantile level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("need at least {MIN_REPLICATES} replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("the original fit did not converge")]
    NotConverged,
    #[error("no average effect was attached to this bootstrap run")]
    NoEffect,
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Draws `y*_it` recursively from the fitted transition density at
/// `(phi_hat, eta_hat_i)`, starting from the observed pre-sample values.
/// Covariates and pre-sample values are copied unchanged.
pub fn resample(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta_hat: &ParameterPoint,
    rng: &mut dyn RngCore,
) -> Result<PanelDataset, PanelError> {
    check_dims(model, data, theta_hat)?;
    let (p, d, m, dx) = (data.lags(), data.dim_y(), data.m(), data.dim_x());
    let mut series = Vec::with_capacity(data.n() * (p + m) * d);
    let mut draw = vec![0.0; d];
    for i in 0..data.n() {
        let start = series.len();
        series.extend_from_slice(data.initial_conditions(i));
        let x = data.covariates(i);
        let eta = theta_hat.eta_i(i);
        for t in 0..m {
            let hist = &series[start + t * d..start + (t + p) * d];
            model.sample_transition(&theta_hat.phi, eta, hist, &x[t * dx..(t + 1) * dx], rng, &mut draw);
            series.extend_from_slice(&draw);
        }
    }
    Ok(data.with_series(series))
}

/// `inf { q : alpha <= F_B(q) }` for the empirical CDF of sorted draws, i.e.
/// the `ceil(alpha B)`-th order statistic.
pub fn quantile(sorted: &[f64], alpha: f64) -> Result<f64, BootstrapError> {
    if sorted.is_empty() {
        return Err(BootstrapError::Empty);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BootstrapError::BadLevel(alpha));
    }
    let b = sorted.len();
    let x = alpha * b as f64;
    // alpha B is often an integer up to rounding (0.6 * 5 = 3.0000000000000004)
    let k = if (x - x.round()).abs() < 1e-9 * b as f64 { x.round() } else { x.ceil() };
    let k = (k as usize).clamp(1, b);
    Ok(sorted[k - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub fit: FitOptions,
    /// Largest tolerated share of failed replicates.
    pub max_failure_share: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 999,
            fit: FitOptions::default(),
            max_failure_share: 0.10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureLog {
    pub count: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl FailureLog {
    fn record(&mut self, reason: &str) {
        self.count += 1;
        *self.reasons.entry(reason.to_string()).or_default() += 1;
    }
}

/// Sorted replicate statistics with failure diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub requested: usize,
    /// Successful replicates.
    pub b: usize,
    pub values: Vec<f64>,
    pub failures: FailureLog,
}

impl BootstrapDraws {
    /// Sorts `values`; non-finite entries are counted as failures.
    pub fn new(requested: usize, values: Vec<f64>, mut failures: FailureLog) -> Self {
        let mut v: Vec<f64> = Vec::with_capacity(values.len());
        for x in values {
            if x.is_finite() {
                v.push(x);
            } else {
                failures.record("non-finite statistic");
            }
        }
        v.sort_by(f64::total_cmp);
        Self {
            requested,
            b: v.len(),
            values: v,
            failures,
        }
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64, BootstrapError> {
        quantile(&self.values, alpha)
    }

    fn check_ceiling(&self, share: f64) -> Result<(), BootstrapError> {
        if self.failures.count as f64 > share * self.requested as f64 || self.b == 0 {
            return Err(BootstrapError::FailureCeiling {
                failures: self.failures.count,
                requested: self.requested,
                reasons: self.failures.reasons.clone(),
            });
        }
        Ok(())
    }
}

/// Which side(s) of the set are bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    TwoSided,
    /// `[lower, inf)`.
    Lower,
    /// `(-inf, upper]`.
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub method: String,
    pub side: Side,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub length: f64,
    pub b: usize,
    pub requested: usize,
    pub failures: FailureLog,
}

impl IntervalReport {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// `[center - scale q_{1-a/2}, center - scale q_{a/2}]` and its one-sided
/// versions, where `a = 1 - level`.
pub fn reflected_interval(
    method: &str,
    center: f64,
    scale: f64,
    draws: &BootstrapDraws,
    level: f64,
    side: Side,
) -> Result<IntervalReport, BootstrapError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(BootstrapError::BadLevel(level));
    }
    let a = 1.0 - level;
    let (lower, upper) = match side {
        Side::TwoSided => (
            center - scale * draws.quantile(1.0 - a / 2.0)?,
            center - scale * draws.quantile(a / 2.0)?,
        ),
        Side::Lower => (center - scale * draws.quantile(1.0 - a)?, f64::INFINITY),
        Side::Upper => (f64::NEG_INFINITY, center - scale * draws.quantile(a)?),
    };
    Ok(IntervalReport {
        method: method.to_string(),
        side,
        level,
        lower,
        upper,
        length: upper - lower,
        b: draws.b,
        requested: draws.requested,
        failures: draws.failures.clone(),
    })
}

/// Everything kept from one successful bootstrap refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStats {
    pub phi: Vec<f64>,
    pub nm: usize,
    /// `None` when the replicate's plug-in variance is not positive definite.
    pub sigma: Option<SigmaHat>,
    pub dropped_strata: usize,
    pub delta: Option<f64>,
    pub delta_se: Option<f64>,
}

/// One set of bootstrap refits shared by all interval constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub phi_hat: Vec<f64>,
    pub nm: usize,
    pub sigma_hat: Option<SigmaHat>,
    pub delta_hat: Option<f64>,
    pub delta_se: Option<f64>,
    pub requested: usize,
    /// Successful replicates in replicate-index order.
    pub replicates: Vec<ReplicateStats>,
    pub failures: FailureLog,
    pub max_failure_share: f64,
}

/// Resamples `cfg.replicates` panels from the fit, refits each from the
/// original estimate, and keeps `phi*`, `Sigma*` and (optionally) the
/// average effect. Replicate `b` draws from `key.child(b)`, so results do not
/// depend on the thread count.
pub fn run_replicates(
    model: &dyn PanelModel,
    data: &PanelDataset,
    fit_hat: &FitResult,
    effect: Option<&dyn AverageEffect>,
    cfg: &BootstrapConfig,
    key: StreamKey,
) -> Result<BootstrapRun, BootstrapError> {
    if !fit_hat.converged {
        return Err(BootstrapError::NotConverged);
    }
    let sub = data.subset(&fit_hat.retained_strata);
    let theta = fit_hat.retained_theta();
    let nm = sub.nm();
    let sigma_hat = SigmaHat::from_profile(&fit_hat.profile_info, theta.dim_phi(), nm).ok();
    let (delta_hat, delta_se) = match effect {
        Some(e) => {
            let d = delta_hat(model, &sub, &theta, e)?.value;
            (Some(d), e.plug_in_se(&sub, &theta, d))
        }
        None => (None, None),
    };

    let outcomes: Vec<Result<ReplicateStats, &'static str>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| one_replicate(model, &sub, &theta, effect, &cfg.fit, key.child(b as u64)))
        .collect();

    let mut failures = FailureLog::default();
    let mut replicates = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok(r) => replicates.push(r),
            Err(reason) => failures.record(reason),
        }
    }
    Ok(BootstrapRun {
        phi_hat: theta.phi.clone(),
        nm,
        sigma_hat,
        delta_hat,
        delta_se,
        requested: cfg.replicates,
        replicates,
        failures,
        max_failure_share: cfg.max_failure_share,
    })
}

fn one_replicate(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
    effect: Option<&dyn AverageEffect>,
    opts: &FitOptions,
    key: StreamKey,
) -> Result<ReplicateStats, &'static str> {
    let star = resample(model, data, theta, &mut key.rng()).map_err(|_| "resample")?;
    let f = match fit(model, &star, theta, opts) {
        Ok(f) => f,
        Err(crate::newton::FitError::AllStrataDropped { .. }) => return Err("all strata degenerate"),
        Err(_) => return Err("fit error"),
    };
    if !f.converged {
        return Err("non-convergence");
    }
    let nm = f.retained_nm(data.m());
    let sigma = SigmaHat::from_profile(&f.profile_info, theta.dim_phi(), nm).ok();
    let (delta, delta_se) = match effect {
        Some(e) => {
            let sub = if f.dropped_strata.is_empty() { star } else { star.subset(&f.retained_strata) };
            let th = f.retained_theta();
            let d = delta_hat(model, &sub, &th, e).map_err(|_| "non-finite effect")?.value;
            (Some(d), e.plug_in_se(&sub, &th, d))
        }
        None => (None, None),
    };
    Ok(ReplicateStats {
        phi: f.theta.phi,
        nm,
        sigma,
        dropped_strata: f.dropped_strata.len(),
        delta,
        delta_se,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How to turn `Delta*` replicates into an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMethod {
    /// `[D - q_{1-a/2}, D - q_{a/2}]` for the draws of `D* - D`.
    Percentile,
    /// Studentized by the effect's plug-in standard error when it has one,
    /// otherwise by the bootstrap standard deviation of `D*`.
    PercentileT,
    /// `D +- z_{1-a/2} sd(D*)`.
    Normal,
}

impl BootstrapRun {
    fn draws(&self, values: Vec<f64>, extra: FailureLog) -> Result<BootstrapDraws, BootstrapError> {
        let mut failures = self.failures.clone();
        for (k, v) in extra.reasons {
            failures.count += v;
            *failures.reasons.entry(k).or_default() += v;
        }
        let d = BootstrapDraws::new(self.requested, values, failures);
        d.check_ceiling(self.max_failure_share)?;
        Ok(d)
    }

    /// Draws of `c'(phi* - phi_hat)`.
    pub fn percentile_draws(&self, c: &[f64]) -> Result<BootstrapDraws, BootstrapError> {
        let center = dot(c, &self.phi_hat);
        let v = self.replicates.iter().map(|r| dot(c, &r.phi) - center).collect();
        self.draws(v, FailureLog::default())
    }

    pub fn percentile(&self, c: &[f64], level: f64, side: Side) -> Result<IntervalReport, BootstrapError> {
        let d = self.percentile_draws(c)?;
        reflected_interval("percentile", dot(c, &self.phi_hat), 1.0, &d, level, side)
    }

    /// Draws of `sqrt(nm*) c'(phi* - phi_hat) / sqrt(c' Sigma* c)`.
    pub fn percentile_t_draws(&self, c: &[f64]) -> Result<BootstrapDraws, BootstrapError> {
        let center = dot(c, &self.phi_hat);
        let mut extra = FailureLog::default();
        let mut v = Vec::with_capacity(self.replicates.len());
        for r in &self.replicates {
            match &r.sigma {
                Some(s) if s.quadratic(c) > 0.0 => {
                    v.push((dot(c, &r.phi) - center) / s.standard_error(c));
                }
                _ => extra.record("non-positive-definite variance"),
            }
        }
        self.draws(v, extra)
    }

    pub fn percentile_t(&self, c: &[f64], level: f64, side: Side) -> Result<IntervalReport, BootstrapError> {
        let sigma = self.sigma_hat.as_ref().ok_or(InferenceError::NotPositiveDefinite { eigenvalue: f64::NAN })?;
        let d = self.percentile_t_draws(c)?;
        reflected_interval("percentile-t", dot(c, &self.phi_hat), sigma.standard_error(c), &d, level, side)
    }

    /// Bootstrap critical value for the quadratic form in `C'(phi - phi_hat)`.
    pub fn ellipsoid(&self, contrasts: &DMatrix<f64>, level: f64) -> Result<EllipsoidSet, BootstrapError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(BootstrapError::BadLevel(level));
        }
        let sigma = self.sigma_hat.clone().ok_or(InferenceError::NotPositiveDefinite { eigenvalue: f64::NAN })?;
        // validates rank and shape once up front
        wald_quadratic(&self.phi_hat, &self.phi_hat, &sigma, contrasts, self.nm)?;
        let mut extra = FailureLog::default();
        let mut v = Vec::with_capacity(self.replicates.len());
        for r in &self.replicates {
            match r.sigma.as_ref().map(|s| wald_quadratic(&r.phi, &self.phi_hat, s, contrasts, r.nm)) {
                Some(Ok(q)) => v.push(q),
                _ => extra.record("non-positive-definite variance"),
            }
        }
        let d = self.draws(v, extra)?;
        let critical = d.quantile(level)?;
        Ok(EllipsoidSet {
            center: self.phi_hat.clone(),
            sigma,
            contrasts: contrasts.transpose().as_slice().to_vec(),
            rank: contrasts.ncols(),
            nm: self.nm,
            level,
            critical,
            b: d.b,
            requested: d.requested,
            failures: d.failures,
        })
    }

    /// Interval for the average effect attached to this run.
    pub fn delta(&self, level: f64, method: DeltaMethod) -> Result<IntervalReport, BootstrapError> {
        let center = self.delta_hat.ok_or(BootstrapError::NoEffect)?;
        let diffs: Vec<f64> = self.replicates.iter().filter_map(|r| r.delta).map(|d| d - center).collect();
        let missing = self.replicates.len() - diffs.len();
        let mut extra = FailureLog::default();
        for _ in 0..missing {
            extra.record("missing effect");
        }
        match method {
            DeltaMethod::Percentile => {
                let d = self.draws(diffs, extra)?;
                reflected_interval("percentile", center, 1.0, &d, level, Side::TwoSided)
            }
            DeltaMethod::Normal => {
                let d = self.draws(diffs, extra)?;
                let sd = std_dev(&d.values);
                let z = crate::oracle::special::normal_quantile(1.0 - (1.0 - level) / 2.0);
                Ok(IntervalReport {
                    method: "normal".into(),
                    side: Side::TwoSided,
                    level,
                    lower: center - z * sd,
                    upper: center + z * sd,
                    length: 2.0 * z * sd,
                    b: d.b,
                    requested: d.requested,
                    failures: d.failures,
                })
            }
            DeltaMethod::PercentileT => match self.delta_se {
                Some(se) => {
                    let mut extra = FailureLog::default();
                    let mut v = Vec::with_capacity(self.replicates.len());
                    for r in &self.replicates {
                        match (r.delta, r.delta_se) {
                            (Some(d), Some(s)) if s > 0.0 => v.push((d - center) / s),
                            _ => extra.record("missing effect standard error"),
                        }
                    }
                    let d = self.draws(v, extra)?;
                    reflected_interval("percentile-t", center, se, &d, level, Side::TwoSided)
                }
                None => {
                    let raw = self.draws(diffs, extra)?;
                    let sd = std_dev(&raw.values);
                    let t = BootstrapDraws {
                        values: raw.values.iter().map(|v| v / sd).collect(),
                        ..raw
                    };
                    reflected_interval("percentile-t", center, sd, &t, level, Side::TwoSided)
                }
            },
        }
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// `{ phi : nm (phi_hat - phi)' C (C' Sigma C)^{-1} C' (phi_hat - phi) <= q* }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSet {
    pub center: Vec<f64>,
    pub sigma: SigmaHat,
    /// `C` stored column after column (`rank` columns of length `dim_phi`).
    pub contrasts: Vec<f64>,
    pub rank: usize,
    pub nm: usize,
    pub level: f64,
    pub critical: f64,
    pub b: usize,
    pub requested: usize,
    pub failures: FailureLog,
}

impl EllipsoidSet {
    pub fn contrast_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.center.len(), self.rank, &self.contrasts)
    }

    pub fn statistic(&self, phi: &[f64]) -> Result<f64, BootstrapError> {
        Ok(wald_quadratic(&self.center, phi, &self.sigma, &self.contrast_matrix(), self.nm)?)
    }

    pub fn contains(&self, phi: &[f64]) -> Result<bool, BootstrapError> {
        Ok(self.statistic(phi)? <= self.critical)
    }
}

fn check_b(b: usize) -> Result<(), BootstrapError> {
    if b < MIN_REPLICATES {
        return Err(BootstrapError::TooFewReplicates(b));
    }
    Ok(())
}

/// Two-sided percentile interval for `c' phi`.
pub fn percentile_ci(
    model: &dyn PanelModel,
    data: &PanelDataset,
    fit_hat: &FitResult,
    c: &[f64],
    level: f64,
    cfg: &BootstrapConfig,
    key: StreamKey,
) -> Result<IntervalReport, BootstrapError> {
    check_b(cfg.replicates)?;
    run_replicates(model, data, fit_hat, None, cfg, key)?.percentile(c, level, Side::TwoSided)
}

/// Two-sided percentile-t interval for `c' phi`, studentizing every
/// replicate by its own plug-in variance.
pub fn percentile_t_ci(
    model: &dyn PanelModel,
    data: &PanelDataset,
    fit_hat: &FitResult,
    c: &[f64],
    level: f64,
    cfg: &BootstrapConfig,
    key: StreamKey,
) -> Result<IntervalReport, BootstrapError> {
    check_b(cfg.replicates)?;
    run_replicates(model, data, fit_hat, None, cfg, key)?.percentile_t(c, level, Side::TwoSided)
}

/// Confidence ellipsoid for `C' phi` calibrated by the bootstrap.
pub fn ellipsoid_critical(
    model: &dyn PanelModel,
    data: &PanelDataset,
    fit_hat: &FitResult,
    contrasts: &DMatrix<f64>,
    level: f64,
    cfg: &BootstrapConfig,
    key: StreamKey,
) -> Result<EllipsoidSet, BootstrapError> {
    check_b(cfg.replicates)?;
    run_replicates(model, data, fit_hat, None, cfg, key)?.ellipsoid(contrasts, level)
}

/// Interval for the average effect `Delta`.
pub fn delta_bootstrap_ci(
    model: &dyn PanelModel,
    data: &PanelDataset,
    fit_hat: &FitResult,
    effect: &dyn AverageEffect,
    level: f64,
    method: DeltaMethod,
    cfg: &BootstrapConfig,
    key: StreamKey,
) -> Result<IntervalReport, BootstrapError> {
    check_b(cfg.replicates)?;
    run_replicates(model, data, fit_hat, Some(effect), cfg, key)?.delta(level, method)
}

/// Writes reports as CSV with columns `method,level,lower,upper,length,B,failures`.
pub fn write_reports_csv<W: Write>(reports: &[IntervalReport], writer: W) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| PanelError::Io(std::io::Error::other(e));
    w.write_record(["method", "level", "lower", "upper", "length", "B", "failures"]).map_err(io)?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.level.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.length.to_string(),
            r.b.to_string(),
            r.failures.count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
