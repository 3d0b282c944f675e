//! Laws of the estimators and statistics of the variance in the
//! normal-means model, where `nm phi_hat / phi_0 ~ chi2(n(m-1))`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::laws::{Gamma3, InvGamma3};
use super::special::{gamma_quantile, integrate, normal_cdf, normal_density, normal_quantile};
use super::OracleError;

fn check_design(n: usize, m: usize) -> Result<(), OracleError> {
    if n < 1 || m < 2 {
        return Err(OracleError::Parameter(format!("need n >= 1 and m >= 2, got n = {n}, m = {m}")));
    }
    Ok(())
}

fn check_level(level: f64) -> Result<(), OracleError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(OracleError::Parameter(format!("level {level} outside (0, 1)")));
    }
    Ok(())
}

fn dof(n: usize, m: usize) -> f64 {
    (n * (m - 1)) as f64
}

/// Law of `sqrt(nm)(phi_hat - phi_0)`.
pub fn mle_exact_law(n: usize, m: usize, phi0: f64) -> Result<Gamma3, OracleError> {
    check_design(n, m)?;
    let r = ((n * m) as f64).sqrt();
    Gamma3::new(-r * phi0, dof(n, m) / 2.0, 2.0 * phi0 / r)
}

/// Conditional law of `sqrt(nm)(phi* - phi_hat)` given `phi_hat`.
pub fn bootstrap_exact_law(n: usize, m: usize, phi_hat: f64) -> Result<Gamma3, OracleError> {
    if !(phi_hat > 0.0) {
        return Err(OracleError::Parameter(format!("phi_hat must be positive, got {phi_hat}")));
    }
    mle_exact_law(n, m, phi_hat)
}

/// The bootstrap law with `phi_hat` replaced by its mean `phi_0 (1 - 1/m)`,
/// i.e. ignoring the sampling error of `phi_hat` around its limit.
pub fn first_order_bootstrap_law(n: usize, m: usize, phi0: f64) -> Result<Gamma3, OracleError> {
    check_design(n, m)?;
    bootstrap_exact_law(n, m, phi0 * (1.0 - 1.0 / m as f64))
}

/// Law of `sqrt(nm)(phi_check - phi_0)` for `phi_check = phi_hat (1 + 1/m)`.
pub fn bias_corrected_exact_law(n: usize, m: usize, phi0: f64) -> Result<Gamma3, OracleError> {
    let g = mle_exact_law(n, m, phi0)?;
    Gamma3::new(g.location, g.shape, (1.0 + 1.0 / m as f64) * g.scale)
}

/// Studentized statistics for the variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Studentized {
    /// `sqrt(nm)(phi_hat - phi_0) / sqrt(2 phi_hat^2)`.
    Hat,
    /// Bias-corrected numerator, uncorrected variance.
    Check,
    /// Bias-corrected numerator and variance.
    Tilde,
    /// Bootstrap replicate of `Hat`.
    Star,
}

impl Studentized {
    pub const ALL: [Studentized; 4] = [Self::Hat, Self::Check, Self::Tilde, Self::Star];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hat => "s_hat",
            Self::Check => "s_check",
            Self::Tilde => "s_tilde",
            Self::Star => "s_star",
        }
    }
}

impl fmt::Display for Studentized {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Studentized {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| OracleError::Parameter(format!("unknown statistic '{s}'")))
    }
}

/// Mirrored inverse-gamma law of a studentized statistic; free of `phi_0`.
pub fn studentized_exact_law(n: usize, m: usize, which: Studentized) -> Result<InvGamma3, OracleError> {
    check_design(n, m)?;
    let r = ((n * m) as f64 / 2.0).sqrt();
    let nm2 = (n * m) as f64 / 2.0;
    let mf = m as f64;
    let (loc, scale) = match which {
        Studentized::Hat | Studentized::Star => (-r, r * nm2),
        Studentized::Check => (-r * (1.0 + 1.0 / mf), r * nm2),
        Studentized::Tilde => (-r, r * nm2 * mf / (mf + 1.0)),
    };
    InvGamma3::new(loc, dof(n, m) / 2.0, scale, true)
}

/// Coverage of the two-sided interval `|T| <= z_{1 - a/2}`. The bootstrap
/// statistic is pivotal, so its percentile-t interval is exact.
pub fn exact_coverage(which: Studentized, n: usize, m: usize, level: f64) -> Result<f64, OracleError> {
    check_level(level)?;
    let law = studentized_exact_law(n, m, which)?;
    if which == Studentized::Star {
        return Ok(level);
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    Ok(law.central_probability(z))
}

/// Where the bootstrap law of the percentile interval is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileMode {
    /// At the limit `phi_0 (1 - 1/m)` of `phi_hat`.
    FirstOrder,
    /// At `phi_hat` itself.
    Full,
}

/// Coverage of the two-sided percentile interval for `phi`, integrating the
/// covering indicator against the `chi2(n(m-1))` law of `nm phi_hat / phi_0`.
pub fn percentile_coverage_quadrature(
    n: usize,
    m: usize,
    phi0: f64,
    level: f64,
    mode: PercentileMode,
) -> Result<f64, OracleError> {
    check_design(n, m)?;
    check_level(level)?;
    if !(phi0 > 0.0) {
        return Err(OracleError::Parameter(format!("phi0 must be positive, got {phi0}")));
    }
    let a = 1.0 - level;
    let nm = (n * m) as f64;
    let root = nm.sqrt();
    let shape = dof(n, m) / 2.0;
    let first = first_order_bootstrap_law(n, m, phi0)?;

    let covers = |x: f64| -> bool {
        let phi_hat = phi0 * x / nm;
        let law = match mode {
            PercentileMode::FirstOrder => first,
            PercentileMode::Full => match bootstrap_exact_law(n, m, phi_hat) {
                Ok(l) => l,
                Err(_) => return false,
            },
        };
        let lower = phi_hat - law.quantile(1.0 - a / 2.0) / root;
        let upper = phi_hat - law.quantile(a / 2.0) / root;
        lower <= phi0 && phi0 <= upper
    };
    let density = |x: f64| 0.5 * super::special::gamma_density(shape, 0.5 * x);

    let lo = 2.0 * gamma_quantile(shape, 1e-12);
    let hi = 2.0 * gamma_quantile(shape, 1.0 - 1e-12);
    const GRID: usize = 4000;
    let step = (hi - lo) / GRID as f64;
    let mut total = 0.0;
    let mut start: Option<f64> = covers(lo).then_some(lo);
    let mut prev = (lo, covers(lo));
    for k in 1..=GRID {
        let x = if k == GRID { hi } else { lo + k as f64 * step };
        let c = covers(x);
        if c != prev.1 {
            let edge = bisect_edge(&covers, prev.0, x, prev.1);
            if c {
                start = Some(edge);
            } else if let Some(s) = start.take() {
                total += integrate(density, s, edge, 1e-13)?;
            }
        }
        prev = (x, c);
    }
    if let Some(s) = start {
        total += integrate(density, s, hi, 1e-13)?;
    }
    Ok(total)
}

fn bisect_edge<F: Fn(f64) -> bool>(f: &F, mut a: f64, mut b: f64, at_a: bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if f(mid) == at_a {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Exact bias and variance of `n^{-1} sum_i zbar_i^2` as an estimator of
/// `n^{-1} sum_i eta_i^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentTruth {
    pub delta: f64,
    pub bias: f64,
    pub variance: f64,
}

pub fn second_moment_truth(phi0: f64, eta0: &[f64], n: usize, m: usize) -> Result<SecondMomentTruth, OracleError> {
    check_design(n, m)?;
    if eta0.len() != n {
        return Err(OracleError::Parameter(format!("{} effects given for n = {n}", eta0.len())));
    }
    if !(phi0 > 0.0) {
        return Err(OracleError::Parameter(format!("phi0 must be positive, got {phi0}")));
    }
    let (nf, mf) = (n as f64, m as f64);
    let delta = eta0.iter().map(|e| e * e).sum::<f64>() / nf;
    Ok(SecondMomentTruth {
        delta,
        bias: phi0 / mf,
        variance: 2.0 * phi0 / (nf * mf) * (2.0 * delta + phi0 / mf),
    })
}

/// Designs `(n, m)` of the exact coverage table.
pub const TABLE1_DESIGNS: [(usize, usize); 4] = [(10, 10), (20, 10), (40, 10), (100, 10)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub n: usize,
    pub m: usize,
    pub s_hat: f64,
    pub s_check: f64,
    pub s_tilde: f64,
    pub s_star: f64,
    pub e_star: f64,
}

pub fn table1(designs: &[(usize, usize)], level: f64, mode: PercentileMode) -> Result<Vec<Table1Row>, OracleError> {
    designs
        .iter()
        .map(|&(n, m)| {
            Ok(Table1Row {
                n,
                m,
                s_hat: exact_coverage(Studentized::Hat, n, m, level)?,
                s_check: exact_coverage(Studentized::Check, n, m, level)?,
                s_tilde: exact_coverage(Studentized::Tilde, n, m, level)?,
                s_star: exact_coverage(Studentized::Star, n, m, level)?,
                e_star: percentile_coverage_quadrature(n, m, 1.0, level, mode)?,
            })
        })
        .collect()
}

pub fn write_table1_csv<W: Write>(rows: &[Table1Row], mut w: W) -> Result<(), OracleError> {
    writeln!(w, "n,m,s_hat,s_check,s_tilde,s_star,e_star")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.n, r.m, r.s_hat, r.s_check, r.s_tilde, r.s_star, r.e_star)?;
    }
    Ok(())
}

/// A tabulated curve set: one `x` column followed by named value columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CurveTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), OracleError> {
        writeln!(w, "{}", self.columns.join(","))?;
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| if k + 1 == points { hi } else { lo + k as f64 * step }).collect()
}

fn gamma_curve(name: &str, law: Gamma3, sd: f64, points: usize) -> CurveTable {
    let lo = law.location.max(law.quantile(1e-10)).min(-6.0 * sd);
    let hi = law.quantile(1.0 - 1e-10).max(6.0 * sd);
    let rows = grid(lo, hi, points)
        .into_iter()
        .map(|x| vec![x, law.pdf(x), law.cdf(x), normal_density(x / sd) / sd, normal_cdf(x / sd)])
        .collect();
    CurveTable {
        name: name.to_string(),
        columns: ["x", "density", "cdf", "reference_density", "reference_cdf"].map(String::from).to_vec(),
        rows,
    }
}

fn studentized_curve(name: &str, law: InvGamma3, twin: Option<InvGamma3>, points: usize) -> CurveTable {
    let lo = law.quantile(1e-10).min(-6.0);
    let hi = law.quantile(1.0 - 1e-10).max(6.0);
    let mut columns = vec!["x", "density", "cdf"];
    if twin.is_some() {
        columns.extend(["star_density", "star_cdf"]);
    }
    columns.extend(["reference_density", "reference_cdf"]);
    let rows = grid(lo, hi, points)
        .into_iter()
        .map(|x| {
            let mut r = vec![x, law.pdf(x), law.cdf(x)];
            if let Some(t) = twin {
                r.extend([t.pdf(x), t.cdf(x)]);
            }
            r.extend([normal_density(x), normal_cdf(x)]);
            r
        })
        .collect();
    CurveTable {
        name: name.to_string(),
        columns: columns.into_iter().map(String::from).collect(),
        rows,
    }
}

/// Densities and CDFs of the centred estimators (against `N(0, 2 phi_0^2)`)
/// and of the studentized statistics (against `N(0, 1)`). The bootstrap
/// estimator is taken at first order.
pub fn figure1_curves(n: usize, m: usize, phi0: f64, points: usize) -> Result<Vec<CurveTable>, OracleError> {
    if points < 2 {
        return Err(OracleError::Parameter("need at least two grid points".into()));
    }
    if !(phi0 > 0.0) {
        return Err(OracleError::Parameter(format!("phi0 must be positive, got {phi0}")));
    }
    let sd = (2.0f64).sqrt() * phi0;
    let s_hat = studentized_exact_law(n, m, Studentized::Hat)?;
    Ok(vec![
        gamma_curve("e_hat", mle_exact_law(n, m, phi0)?, sd, points),
        gamma_curve("e_star", first_order_bootstrap_law(n, m, phi0)?, sd, points),
        gamma_curve("e_check", bias_corrected_exact_law(n, m, phi0)?, sd, points),
        studentized_curve("s_hat", s_hat, Some(studentized_exact_law(n, m, Studentized::Star)?), points),
        studentized_curve("s_check", studentized_exact_law(n, m, Studentized::Check)?, None, points),
        studentized_curve("s_tilde", studentized_exact_law(n, m, Studentized::Tilde)?, None, points),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mle_law_moments() {
        let g = mle_exact_law(10, 5, 1.0).unwrap();
        assert!((g.mean() + 2f64.sqrt()).abs() < 1e-12);
        assert!((g.variance() - 1.6).abs() < 1e-12);
        let g = mle_exact_law(30, 4, 2.5).unwrap();
        assert!((g.mean() + (30.0f64 / 4.0).sqrt() * 2.5).abs() < 1e-12);
        assert!((g.variance() - 2.0 * 2.5 * 2.5 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_law_is_mle_law_with_plug_in() {
        assert_eq!(bootstrap_exact_law(7, 3, 1.7).unwrap(), mle_exact_law(7, 3, 1.7).unwrap());
        assert!(bootstrap_exact_law(7, 3, 0.0).is_err());
        assert!((bootstrap_exact_law(7, 3, 2.0).unwrap().location + 21f64.sqrt() * 2.0).abs() < 1e-14);
    }

    #[test]
    fn star_law_equals_hat_law() {
        let a = studentized_exact_law(10, 10, Studentized::Hat).unwrap();
        let b = studentized_exact_law(10, 10, Studentized::Star).unwrap();
        assert_eq!(a, b);
        assert!(a.quantile(0.5) < 0.0);
    }

    #[test]
    fn studentized_law_matches_transformed_chi_square() {
        // s_hat = sqrt(nm/2)(1 - nm / X) with X ~ chi2(n(m-1))
        let (n, m) = (6, 4);
        let law = studentized_exact_law(n, m, Studentized::Hat).unwrap();
        let shape = dof(n, m) / 2.0;
        let nm = (n * m) as f64;
        for p in [0.05, 0.3, 0.5, 0.8, 0.99] {
            let x = 2.0 * gamma_quantile(shape, p);
            let s = (nm / 2.0).sqrt() * (1.0 - nm / x);
            assert!((law.cdf(s) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn second_moment_truth_values() {
        let t = second_moment_truth(1.0, &[0.0; 50], 50, 10).unwrap();
        assert!((t.bias - 0.1).abs() < 1e-15);
        assert!((t.variance - 2.0 / (500.0 * 10.0)).abs() < 1e-15);
        let eta: Vec<f64> = (1..=50).map(|i| i as f64 / 50.0).collect();
        assert_eq!(second_moment_truth(1.0, &eta, 50, 10).unwrap().bias, 0.1);
    }
}
