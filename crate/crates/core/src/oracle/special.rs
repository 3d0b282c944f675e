//! Special functions and quadrature used by the exact-distribution oracle.

use statrs::distribution::{ContinuousCDF, Normal};
use std::f64::consts::PI;

use statrs::function::gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuadratureError {
    #[error("adaptive quadrature did not reach the requested tolerance on [{a}, {b}]")]
    NotConverged { a: f64, b: f64 },
}

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

/// `ln Gamma(a) - [(a - 1/2) ln a - a + ln(2 pi) / 2]`.
fn stirling_correction(a: f64) -> f64 {
    if a < 10.0 {
        return ln_gamma(a) - ((a - 0.5) * a.ln() - a + 0.5 * (2.0 * PI).ln());
    }
    let r = 1.0 / a;
    let r2 = r * r;
    // Bernoulli-number series, truncation error below 1e-17 for a >= 10
    r * (1.0 / 12.0 - r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 * (1.0 / 1188.0)))))
}

/// `ln(1 + t) - t`, accurate for small `t`.
fn log1pmx(t: f64) -> f64 {
    if t.abs() > 0.25 {
        return t.ln_1p() - t;
    }
    // -t^2/2 + t^3/3 - ...
    let mut term = t;
    let mut sum = 0.0;
    for k in 2..200 {
        term *= -t;
        let add = term / k as f64;
        sum += add;
        if add.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `x^a e^{-x} / Gamma(a)`, keeping full relative accuracy for large `a`
/// by expanding around `x = a`.
fn gamma_prefix(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if a < 10.0 {
        return (a * x.ln() - x - ln_gamma(a)).exp();
    }
    let t = (x - a) / a;
    (a / (2.0 * PI)).sqrt() * (a * log1pmx(t) - stirling_correction(a)).exp()
}

/// `P(a, x)` by its power series, valid for `x < a + 1`.
fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut k = 1.0;
    while k < 100_000.0 {
        term *= x / (a + k);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
        k += 1.0;
    }
    gamma_prefix(a, x) * sum
}

/// `Q(a, x)` by its continued fraction (modified Lentz), for `x >= a + 1`.
fn upper_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    let mut i = 1.0;
    while i < 100_000.0 {
        let an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
        i += 1.0;
    }
    gamma_prefix(a, x) * h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else if x < a + 1.0 {
        lower_series(a, x)
    } else {
        1.0 - upper_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn reg_upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_fraction(a, x)
    }
}

/// Density of the unit-scale gamma law with shape `a`.
pub fn gamma_density(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() - x - ln_gamma(a)).exp()
}

/// Quantile of the unit-scale gamma law with shape `a`.
pub fn gamma_quantile(a: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // Wilson-Hilferty start
    let z = normal_quantile(p);
    let c = 1.0 / (9.0 * a);
    let mut x = (a * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-300);
    if !x.is_finite() || x <= 0.0 {
        x = a.max(1e-3);
    }
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        // work in whichever tail keeps the residual accurate
        let resid = if p < 0.5 {
            reg_lower_gamma(a, x) - p
        } else {
            (1.0 - p) - reg_upper_gamma(a, x)
        };
        if resid > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = gamma_density(a, x);
        let mut next = if dens > 0.0 { x - resid / dens } else { f64::NAN };
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 1e-15 * x.abs() {
            return next;
        }
        x = next;
    }
    x
}

pub fn normal_cdf(x: f64) -> f64 {
    let tail = 0.5 * reg_upper_gamma(0.5, 0.5 * x * x);
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

pub fn normal_density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = Normal::standard().inverse_cdf(p);
    // polish against the more accurate CDF
    for _ in 0..3 {
        let dens = normal_density(x);
        if dens <= 0.0 {
            break;
        }
        let resid = if p < 0.5 { normal_cdf(x) - p } else { (1.0 - p) - normal_cdf(-x) };
        x -= resid / dens;
    }
    x
}

// 10-point Gauss-Legendre nodes and weights on [-1, 1]
const GL_NODES: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_4,
    0.219_086_362_515_982_0,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_1,
];

fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let mut s = 0.0;
    for (x, w) in GL_NODES.iter().zip(&GL_WEIGHTS) {
        s += w * (f(mid - half * x) + f(mid + half * x));
    }
    s * half
}

/// Adaptive Gauss-Legendre: a panel is accepted when splitting it changes
/// the estimate by less than `abs_tol` scaled to the panel width.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64, QuadratureError> {
    if a == b {
        return Ok(0.0);
    }
    let width = b - a;
    let mut stack = vec![(a, b, gauss_legendre(&f, a, b), 0u32)];
    let mut total = 0.0;
    while let Some((lo, hi, whole, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = gauss_legendre(&f, lo, mid);
        let right = gauss_legendre(&f, mid, hi);
        let tol = abs_tol * (hi - lo) / width;
        if (left + right - whole).abs() <= tol.max(1e-13 * (left + right).abs()) {
            total += left + right;
        } else if depth >= 50 {
            return Err(QuadratureError::NotConverged { a: lo, b: hi });
        } else {
            stack.push((mid, hi, right, depth + 1));
            stack.push((lo, mid, left, depth + 1));
        }
    }
    Ok(total)
}
