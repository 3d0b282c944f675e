//! Newton-Raphson for fixed-effect likelihoods using the block-arrow
//! structure of the Hessian.
//!
//! ```text
//!   [ H_pp   H_p1   H_p2  ...  H_pn ]
//!   [ H_1p   H_11    0    ...   0   ]
//!   [ H_2p    0     H_22  ...   0   ]
//!   [  ...                          ]
//!   [ H_np    0      0    ...  H_nn ]
//! ```
//!
//! Only the border and the diagonal blocks are stored. A Newton step costs one
//! small solve per stratum plus one `dim_phi x dim_phi` solve with the profile
//! matrix `H_pp - sum_i H_pi H_ii^{-1} H_ip`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{check_dims, ObsDerivatives, PanelDataset, PanelError, PanelModel, ParameterPoint};

/// Stratum blocks whose condition estimate exceeds this are treated as singular.
pub const MAX_BLOCK_CONDITION: f64 = 1e12;

/// Below this many strata the assembly runs on the calling thread.
const PARALLEL_STRATA: usize = 512;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("starting point is not finite or violates the parameter space")]
    InvalidStart,
    #[error("every stratum was dropped as degenerate")]
    AllStrataDropped { dropped: Vec<usize> },
    #[error("profile matrix is singular")]
    ProfileSingular,
    #[error("singular fixed-effect block in strata {0:?}")]
    SingularStrata(Vec<usize>),
}

/// Score and Hessian in block-arrow layout. Matrices are row-major; the
/// cross block of stratum `i` is `dim_phi x dim_eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScoreHessian {
    pub dim_phi: usize,
    pub dim_eta: usize,
    pub n: usize,
    pub loglik: f64,
    pub s_phi: Vec<f64>,
    pub s_eta: Vec<f64>,
    pub h_phiphi: Vec<f64>,
    pub h_phieta: Vec<f64>,
    pub h_etaeta: Vec<f64>,
}

impl BlockScoreHessian {
    pub fn s_eta_i(&self, i: usize) -> &[f64] {
        &self.s_eta[i * self.dim_eta..(i + 1) * self.dim_eta]
    }

    pub fn h_phieta_i(&self, i: usize) -> &[f64] {
        let k = self.dim_phi * self.dim_eta;
        &self.h_phieta[i * k..(i + 1) * k]
    }

    pub fn h_etaeta_i(&self, i: usize) -> &[f64] {
        let k = self.dim_eta * self.dim_eta;
        &self.h_etaeta[i * k..(i + 1) * k]
    }

    /// Sup-norm of the full score vector.
    pub fn score_norm(&self) -> f64 {
        self.s_phi
            .iter()
            .chain(&self.s_eta)
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Per-stratum sums of the observation derivatives. The `phi` parts are kept
/// per stratum so the reduction over strata happens in a fixed order.
struct StratumBlock {
    loglik: f64,
    s_phi: Vec<f64>,
    h_phiphi: Vec<f64>,
}

fn assemble_stratum(
    model: &dyn PanelModel,
    data: &PanelDataset,
    phi: &[f64],
    eta: &[f64],
    i: usize,
    s_eta: &mut [f64],
    h_pe: &mut [f64],
    h_ee: &mut [f64],
) -> Result<StratumBlock, PanelError> {
    let dims = model.dims();
    let mut obs = ObsDerivatives::new(dims);
    let mut block = StratumBlock {
        loglik: 0.0,
        s_phi: vec![0.0; dims.dim_phi],
        h_phiphi: vec![0.0; dims.dim_phi * dims.dim_phi],
    };
    s_eta.fill(0.0);
    h_pe.fill(0.0);
    h_ee.fill(0.0);
    for t in 1..=data.m() {
        model.derivatives(phi, eta, &data.z_unchecked(i, t), &mut obs);
        if !obs.is_finite() {
            return Err(PanelError::NonFinite {
                stratum: i,
                period: t,
            });
        }
        block.loglik += obs.value;
        add(&mut block.s_phi, &obs.d_phi);
        add(&mut block.h_phiphi, &obs.h_phiphi);
        add(s_eta, &obs.d_eta);
        add(h_pe, &obs.h_phieta);
        add(h_ee, &obs.h_etaeta);
    }
    symmetrize(&mut block.h_phiphi, dims.dim_phi);
    symmetrize(h_ee, dims.dim_eta);
    Ok(block)
}

#[inline]
fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn symmetrize(h: &mut [f64], d: usize) {
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (h[r * d + c] + h[c * d + r]);
            h[r * d + c] = v;
            h[c * d + r] = v;
        }
    }
}

/// Sums the analytic derivatives over observations into block-arrow form.
pub fn assemble(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
) -> Result<BlockScoreHessian, PanelError> {
    check_dims(model, data, theta)?;
    let dims = model.dims();
    let (dp, de, n) = (dims.dim_phi, dims.dim_eta, data.n());
    let mut s_eta = vec![0.0; n * de];
    let mut h_phieta = vec![0.0; n * dp * de];
    let mut h_etaeta = vec![0.0; n * de * de];

    let work = |(i, ((se, hpe), hee)): (usize, ((&mut [f64], &mut [f64]), &mut [f64]))| {
        assemble_stratum(model, data, &theta.phi, theta.eta_i(i), i, se, hpe, hee)
    };
    let blocks: Vec<Result<StratumBlock, PanelError>> = if n >= PARALLEL_STRATA {
        s_eta
            .par_chunks_mut(de)
            .zip(h_phieta.par_chunks_mut(dp * de))
            .zip(h_etaeta.par_chunks_mut(de * de))
            .enumerate()
            .map(work)
            .collect()
    } else {
        s_eta
            .chunks_mut(de)
            .zip(h_phieta.chunks_mut(dp * de))
            .zip(h_etaeta.chunks_mut(de * de))
            .enumerate()
            .map(work)
            .collect()
    };

    let mut loglik = 0.0;
    let mut s_phi = vec![0.0; dp];
    let mut h_phiphi = vec![0.0; dp * dp];
    for b in blocks {
        let b = b?;
        loglik += b.loglik;
        add(&mut s_phi, &b.s_phi);
        add(&mut h_phiphi, &b.h_phiphi);
    }
    Ok(BlockScoreHessian {
        dim_phi: dp,
        dim_eta: de,
        n,
        loglik,
        s_phi,
        s_eta,
        h_phiphi,
        h_phieta,
        h_etaeta,
    })
}

/// Solves `H x = rhs` in place for a small symmetric block `H` (row-major,
/// `d x d`) and `cols` right-hand sides stored column after column.
/// Returns `None` when the block is singular to working precision.
fn solve_block(h: &[f64], d: usize, rhs: &mut [f64], cols: usize) -> Option<()> {
    if d == 1 {
        let v = h[0];
        if v == 0.0 || !v.is_finite() {
            return None;
        }
        for r in rhs.iter_mut() {
            *r /= v;
        }
        return Some(());
    }
    let hm = DMatrix::from_row_slice(d, d, h);
    // Blocks are negative definite near a maximum; factor -H by Cholesky and
    // fall back to pivoted LU otherwise.
    if let Some(chol) = (-hm.clone()).cholesky() {
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..d).map(|k| l[(k, k)]).collect();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(a, b), &v| (a.min(v), b.max(v)));
        if (hi / lo).powi(2) > MAX_BLOCK_CONDITION {
            return None;
        }
        for c in 0..cols {
            let col = DVector::from_column_slice(&rhs[c * d..(c + 1) * d]);
            let x = -chol.solve(&col);
            rhs[c * d..(c + 1) * d].copy_from_slice(x.as_slice());
        }
        return Some(());
    }
    let svd = hm.clone().svd(false, false);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 0.0) || smax / smin > MAX_BLOCK_CONDITION {
        return None;
    }
    let lu = hm.full_piv_lu();
    for c in 0..cols {
        let col = DVector::from_column_slice(&rhs[c * d..(c + 1) * d]);
        let x = lu.solve(&col)?;
        rhs[c * d..(c + 1) * d].copy_from_slice(x.as_slice());
    }
    Some(())
}

/// Newton increment in the `(phi, eta_1, ..., eta_n)` layout, together with
/// the profile matrix it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonStep {
    pub d_phi: Vec<f64>,
    pub d_eta: Vec<f64>,
    /// `H_pp - sum_i H_pi H_ii^{-1} H_ip`, row-major.
    pub profile: Vec<f64>,
}

/// Profile matrix `H_pp - sum_i H_pi H_ii^{-1} H_ip` together with the
/// per-stratum solves it needs: `u_i = H_ii^{-1} s_i` and
/// `w_i = H_ii^{-1} H_ip` (column-major, `dim_eta x dim_phi`).
struct Partitioned {
    profile: DMatrix<f64>,
    reduced_score: DVector<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
}

fn partition(b: &BlockScoreHessian) -> Result<Partitioned, FitError> {
    let (dp, de, n) = (b.dim_phi, b.dim_eta, b.n);
    let mut profile = DMatrix::from_row_slice(dp, dp, &b.h_phiphi);
    let mut reduced_score = DVector::from_column_slice(&b.s_phi);
    let mut u = vec![0.0; n * de];
    let mut w = vec![0.0; n * de * dp];
    let mut singular = Vec::new();
    let mut rhs = vec![0.0; de * (1 + dp)];
    for i in 0..n {
        let hpe = b.h_phieta_i(i);
        // column 0: s_i; columns 1..: H_ip = H_pi' (column k is row k of H_pi)
        rhs[..de].copy_from_slice(b.s_eta_i(i));
        for k in 0..dp {
            rhs[de * (1 + k)..de * (2 + k)].copy_from_slice(&hpe[k * de..(k + 1) * de]);
        }
        if solve_block(b.h_etaeta_i(i), de, &mut rhs, 1 + dp).is_none() {
            singular.push(i);
            continue;
        }
        u[i * de..(i + 1) * de].copy_from_slice(&rhs[..de]);
        w[i * de * dp..(i + 1) * de * dp].copy_from_slice(&rhs[de..]);
        for r in 0..dp {
            let row = &hpe[r * de..(r + 1) * de];
            reduced_score[r] -= dot(row, &rhs[..de]);
            for c in 0..dp {
                profile[(r, c)] -= dot(row, &rhs[de * (1 + c)..de * (2 + c)]);
            }
        }
    }
    if !singular.is_empty() {
        return Err(FitError::SingularStrata(singular));
    }
    let sym = 0.5 * (&profile + profile.transpose());
    Ok(Partitioned {
        profile: sym,
        reduced_score,
        u,
        w,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn solve_profile(profile: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let d = profile.nrows();
    if d == 1 {
        let v = profile[(0, 0)];
        return (v != 0.0 && v.is_finite()).then(|| rhs / v);
    }
    profile.clone().full_piv_lu().solve(rhs)
}

/// `d_phi = -P^{-1} (s_phi - sum_i H_pi H_ii^{-1} s_i)` and
/// `d_eta_i = -H_ii^{-1} (s_i + H_ip d_phi)`, which together equal
/// `-H^{-1} s` for the full Hessian.
pub fn newton_direction(b: &BlockScoreHessian) -> Result<NewtonStep, FitError> {
    let (dp, de, n) = (b.dim_phi, b.dim_eta, b.n);
    let part = partition(b)?;
    let step_phi = -solve_profile(&part.profile, &part.reduced_score).ok_or(FitError::ProfileSingular)?;
    if step_phi.iter().any(|v| !v.is_finite()) {
        return Err(FitError::ProfileSingular);
    }
    let mut d_eta = vec![0.0; n * de];
    for i in 0..n {
        let w = &part.w[i * de * dp..(i + 1) * de * dp];
        for r in 0..de {
            let mut v = part.u[i * de + r];
            for c in 0..dp {
                v += w[c * de + r] * step_phi[c];
            }
            d_eta[i * de + r] = -v;
        }
    }
    let mut profile = vec![0.0; dp * dp];
    for r in 0..dp {
        for c in 0..dp {
            profile[r * dp + c] = part.profile[(r, c)];
        }
    }
    Ok(NewtonStep {
        d_phi: step_phi.as_slice().to_vec(),
        d_eta,
        profile,
    })
}

/// Profile matrix `H_pp - sum_i H_pi H_ii^{-1} H_ip`, row-major.
pub fn profile_matrix(b: &BlockScoreHessian) -> Result<Vec<f64>, FitError> {
    let part = partition(b)?;
    let dp = b.dim_phi;
    let mut out = vec![0.0; dp * dp];
    for r in 0..dp {
        for c in 0..dp {
            out[r * dp + c] = part.profile[(r, c)];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Sup-norm score tolerance; `None` means `1e-8 * n * m` over retained strata.
    pub tol_score: Option<f64>,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Bound on `|eta_i|` per coordinate beyond which a stratum is declared
    /// divergent (only for models whose effects can diverge).
    pub eta_cap: f64,
    /// Drop strata failing the model's admissibility check before iterating.
    pub screen_strata: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_score: None,
            max_iter: 100,
            max_halvings: 30,
            eta_cap: 15.0,
            screen_strata: true,
        }
    }
}

impl FitOptions {
    fn tolerance(&self, nm: usize) -> f64 {
        self.tol_score.unwrap_or(1e-8 * nm as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    /// Estimates for all `n` strata of the input; dropped strata carry NaN.
    pub theta: ParameterPoint,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub loglik: f64,
    pub dropped_strata: Vec<usize>,
    pub retained_strata: Vec<usize>,
    /// `H_pp - sum_i H_pi H_ii^{-1} H_ip` at the estimate, row-major.
    pub profile_info: Vec<f64>,
    pub restarts: usize,
}

impl FitResult {
    /// Estimate restricted to the retained strata, in retained order.
    pub fn retained_theta(&self) -> ParameterPoint {
        self.theta.subset(&self.retained_strata)
    }

    pub fn retained_nm(&self, m: usize) -> usize {
        self.retained_strata.len() * m
    }
}

enum Inner {
    Done {
        theta: ParameterPoint,
        blocks: BlockScoreHessian,
        converged: bool,
        iterations: usize,
    },
    /// Local stratum indices to drop before restarting.
    Drop(Vec<usize>),
}

fn newton_loop(
    model: &dyn PanelModel,
    data: &PanelDataset,
    start: ParameterPoint,
    opts: &FitOptions,
    mut trace: Option<&mut Vec<ParameterPoint>>,
) -> Result<Inner, FitError> {
    let tol = opts.tolerance(data.nm());
    let cap = model.effects_can_diverge().then_some(opts.eta_cap);
    let mut theta = start;
    let mut blocks = assemble(model, data, &theta)?;
    let mut iterations = 0;
    let mut converged = false;
    if let Some(t) = trace.as_deref_mut() {
        t.push(theta.clone());
    }

    while iterations < opts.max_iter {
        if blocks.score_norm() <= tol {
            converged = true;
            break;
        }
        let newton = match newton_direction(&blocks) {
            Ok(s) => Some(s),
            Err(FitError::SingularStrata(s)) => return Ok(Inner::Drop(s)),
            Err(FitError::ProfileSingular) => None,
            Err(e) => return Err(e),
        };
        // Away from the maximum the Hessian can be indefinite and the Newton
        // direction need not go uphill; fall back to a scaled gradient.
        let newton = newton.filter(|s| ascent_slope(&blocks, s) > 0.0);
        let update = newton
            .and_then(|s| damped_update(model, data, &theta, &blocks, &s, opts))
            .or_else(|| damped_update(model, data, &theta, &blocks, &scaled_gradient(&blocks), opts));
        let Some((next, next_blocks)) = update else {
            break;
        };
        theta = next;
        blocks = next_blocks;
        iterations += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(theta.clone());
        }
        if let Some(cap) = cap {
            let diverged: Vec<usize> = (0..theta.n())
                .filter(|&i| theta.eta_i(i).iter().any(|v| v.abs() > cap))
                .collect();
            if !diverged.is_empty() {
                return Ok(Inner::Drop(diverged));
            }
        }
    }

    if converged {
        // The direction at the accepted point is nearly free; take it when it
        // keeps both the likelihood and the score criterion.
        if let Ok(step) = newton_direction(&blocks) {
            if let Some((next, next_blocks)) = full_step(model, data, &theta, &blocks, &step) {
                if next_blocks.score_norm() <= tol {
                    theta = next;
                    blocks = next_blocks;
                }
            }
        }
    }
    Ok(Inner::Done {
        theta,
        blocks,
        converged,
        iterations,
    })
}

fn ascent_slope(b: &BlockScoreHessian, step: &NewtonStep) -> f64 {
    dot(&b.s_phi, &step.d_phi) + dot(&b.s_eta, &step.d_eta)
}

/// Score divided coordinate-wise by the magnitude of the Hessian diagonal.
fn scaled_gradient(b: &BlockScoreHessian) -> NewtonStep {
    let scale = |s: f64, h: f64| s / h.abs().max(1e-8);
    let (dp, de) = (b.dim_phi, b.dim_eta);
    let d_phi = (0..dp).map(|k| scale(b.s_phi[k], b.h_phiphi[k * dp + k])).collect();
    let d_eta = (0..b.n * de)
        .map(|j| {
            let (i, k) = (j / de, j % de);
            scale(b.s_eta[j], b.h_etaeta_i(i)[k * de + k])
        })
        .collect();
    NewtonStep {
        d_phi,
        d_eta,
        profile: Vec::new(),
    }
}

fn candidate(theta: &ParameterPoint, step: &NewtonStep, scale: f64) -> ParameterPoint {
    let mut c = theta.clone();
    for (v, d) in c.phi.iter_mut().zip(&step.d_phi) {
        *v += scale * d;
    }
    for (v, d) in c.eta.iter_mut().zip(&step.d_eta) {
        *v += scale * d;
    }
    c
}

fn try_point(
    model: &dyn PanelModel,
    data: &PanelDataset,
    cand: &ParameterPoint,
    current: f64,
) -> Option<BlockScoreHessian> {
    if !cand.is_finite() || !model.phi_admissible(&cand.phi) {
        return None;
    }
    let b = assemble(model, data, cand).ok()?;
    (b.loglik >= current - loglik_slack(current)).then_some(b)
}

/// Rounding allowance when comparing log-likelihoods. Near the maximum the
/// true gain of a Newton step falls below the precision of the sum.
pub(crate) fn loglik_slack(ll: f64) -> f64 {
    1e-13 * (1.0 + ll.abs())
}

fn full_step(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
    blocks: &BlockScoreHessian,
    step: &NewtonStep,
) -> Option<(ParameterPoint, BlockScoreHessian)> {
    let cand = candidate(theta, step, 1.0);
    let b = try_point(model, data, &cand, blocks.loglik)?;
    Some((cand, b))
}

/// Full Newton step, halved until the log-likelihood does not decrease.
fn damped_update(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
    blocks: &BlockScoreHessian,
    step: &NewtonStep,
    opts: &FitOptions,
) -> Option<(ParameterPoint, BlockScoreHessian)> {
    let mut scale = 1.0;
    for _ in 0..=opts.max_halvings {
        let cand = candidate(theta, step, scale);
        if let Some(b) = try_point(model, data, &cand, blocks.loglik) {
            return Some((cand, b));
        }
        scale *= 0.5;
    }
    None
}

/// Maximizes the panel log-likelihood from `start`.
///
/// Strata failing [`PanelModel::stratum_admissible`] are dropped up front.
/// A stratum whose effect crosses `eta_cap` (or whose block turns singular)
/// is dropped as well and the fit restarts from `start` on the remaining
/// strata. Hitting `max_iter` yields `converged == false`.
pub fn fit(
    model: &dyn PanelModel,
    data: &PanelDataset,
    start: &ParameterPoint,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    fit_impl(model, data, start, opts, None)
}

/// Like [`fit`], additionally recording every accepted iterate of the final
/// restart (restricted to the retained strata).
pub fn fit_traced(
    model: &dyn PanelModel,
    data: &PanelDataset,
    start: &ParameterPoint,
    opts: &FitOptions,
) -> Result<(FitResult, Vec<ParameterPoint>), FitError> {
    let mut trace = Vec::new();
    let r = fit_impl(model, data, start, opts, Some(&mut trace))?;
    Ok((r, trace))
}

fn fit_impl(
    model: &dyn PanelModel,
    data: &PanelDataset,
    start: &ParameterPoint,
    opts: &FitOptions,
    mut trace: Option<&mut Vec<ParameterPoint>>,
) -> Result<FitResult, FitError> {
    check_dims(model, data, start)?;
    if !start.is_finite() || !model.phi_admissible(&start.phi) {
        return Err(FitError::InvalidStart);
    }
    let n = data.n();
    let mut dropped: Vec<usize> = Vec::new();
    let mut active: Vec<usize> = (0..n)
        .filter(|&i| {
            let ok = !opts.screen_strata || model.stratum_admissible(data, i);
            if !ok {
                dropped.push(i);
            }
            ok
        })
        .collect();

    let mut restarts = 0;
    loop {
        if active.is_empty() {
            dropped.sort_unstable();
            return Err(FitError::AllStrataDropped { dropped });
        }
        let sub = if active.len() == n {
            data.clone()
        } else {
            data.subset(&active)
        };
        if let Some(t) = trace.as_deref_mut() {
            t.clear();
        }
        match newton_loop(model, &sub, start.subset(&active), opts, trace.as_deref_mut())? {
            Inner::Drop(local) => {
                for &k in local.iter().rev() {
                    dropped.push(active.remove(k));
                }
                restarts += 1;
            }
            Inner::Done {
                theta,
                blocks,
                converged,
                iterations,
            } => {
                let profile_info = profile_matrix(&blocks)?;
                let de = theta.dim_eta;
                let mut full = ParameterPoint {
                    phi: theta.phi.clone(),
                    eta: vec![f64::NAN; n * de],
                    dim_eta: de,
                };
                for (k, &i) in active.iter().enumerate() {
                    full.eta_i_mut(i).copy_from_slice(theta.eta_i(k));
                }
                dropped.sort_unstable();
                return Ok(FitResult {
                    theta: full,
                    converged,
                    iterations,
                    score_norm: blocks.score_norm(),
                    loglik: blocks.loglik,
                    dropped_strata: dropped,
                    retained_strata: active,
                    profile_info,
                    restarts,
                });
            }
        }
    }
}
