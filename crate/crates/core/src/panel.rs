//! Panel data, parameter layout and the model contract.
//!
//! A dataset holds `n` strata observed over a common `m` periods. Each stratum
//! keeps its outcome history as one contiguous series: the `p` pre-sample
//! values first, then the `m` sample values. With that layout the lag window of
//! any period is a contiguous slice, so building `z_it` never allocates.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("invalid panel shape: {0}")]
    Shape(String),
    #[error("index out of range: stratum {stratum}, period {period} (n = {n}, m = {m})")]
    OutOfRange {
        stratum: usize,
        period: usize,
        n: usize,
        m: usize,
    },
    #[error("non-finite log-likelihood at stratum {stratum}, period {period}")]
    NonFinite { stratum: usize, period: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Balanced panel of `n` strata by `m` periods with lag order `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    n: usize,
    m: usize,
    p: usize,
    dim_y: usize,
    dim_x: usize,
    /// Per stratum: `p` pre-sample outcomes followed by `m` outcomes.
    series: Vec<f64>,
    /// Per stratum: `m` covariate vectors.
    x: Vec<f64>,
    labels: Vec<String>,
}

impl PanelDataset {
    /// Builds a dataset from per-stratum pre-sample values, outcomes and
    /// covariates, all stored stratum-major.
    pub fn new(
        n: usize,
        m: usize,
        p: usize,
        dim_y: usize,
        dim_x: usize,
        y_pre: &[f64],
        y: &[f64],
        x: &[f64],
    ) -> Result<Self, PanelError> {
        if n < 1 {
            return Err(PanelError::Shape("need at least one stratum".into()));
        }
        if m < 2 {
            return Err(PanelError::Shape(format!("need m >= 2 periods, got {m}")));
        }
        if dim_y < 1 {
            return Err(PanelError::Shape("outcome dimension must be positive".into()));
        }
        if y.len() != n * m * dim_y {
            return Err(PanelError::Shape(format!(
                "expected {} outcome values, got {}",
                n * m * dim_y,
                y.len()
            )));
        }
        if y_pre.len() != n * p * dim_y {
            return Err(PanelError::Shape(format!(
                "expected {} pre-sample values, got {}",
                n * p * dim_y,
                y_pre.len()
            )));
        }
        if x.len() != n * m * dim_x {
            return Err(PanelError::Shape(format!(
                "expected {} covariate values, got {}",
                n * m * dim_x,
                x.len()
            )));
        }
        let stride = (p + m) * dim_y;
        let mut series = Vec::with_capacity(n * stride);
        for i in 0..n {
            series.extend_from_slice(&y_pre[i * p * dim_y..(i + 1) * p * dim_y]);
            series.extend_from_slice(&y[i * m * dim_y..(i + 1) * m * dim_y]);
        }
        Ok(Self {
            n,
            m,
            p,
            dim_y,
            dim_x,
            series,
            x: x.to_vec(),
            labels: (1..=n).map(|i| i.to_string()).collect(),
        })
    }

    pub(crate) fn from_series(
        m: usize,
        p: usize,
        dim_y: usize,
        dim_x: usize,
        series: Vec<f64>,
        x: Vec<f64>,
        labels: Vec<String>,
    ) -> Self {
        let n = labels.len();
        debug_assert_eq!(series.len(), n * (p + m) * dim_y);
        debug_assert_eq!(x.len(), n * m * dim_x);
        Self {
            n,
            m,
            p,
            dim_y,
            dim_x,
            series,
            x,
            labels,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, PanelError> {
        if labels.len() != self.n {
            return Err(PanelError::Shape(format!(
                "{} labels for {} strata",
                labels.len(),
                self.n
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn lags(&self) -> usize {
        self.p
    }
    pub fn dim_y(&self) -> usize {
        self.dim_y
    }
    pub fn dim_x(&self) -> usize {
        self.dim_x
    }
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Total number of observations `n * m`.
    pub fn nm(&self) -> usize {
        self.n * self.m
    }

    /// Full outcome series of stratum `i` (pre-sample values first).
    pub fn series(&self, i: usize) -> &[f64] {
        let stride = (self.p + self.m) * self.dim_y;
        &self.series[i * stride..(i + 1) * stride]
    }

    /// Outcomes of stratum `i` for periods `1..=m`.
    pub fn outcomes(&self, i: usize) -> &[f64] {
        &self.series(i)[self.p * self.dim_y..]
    }

    /// Pre-sample values `y_{i-}` of stratum `i`.
    pub fn initial_conditions(&self, i: usize) -> &[f64] {
        &self.series(i)[..self.p * self.dim_y]
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        let stride = self.m * self.dim_x;
        &self.x[i * stride..(i + 1) * stride]
    }

    /// `z_it` for stratum `i` (0-based) and period `t` (1-based).
    pub fn z(&self, i: usize, t: usize) -> Result<ZTuple<'_>, PanelError> {
        if i >= self.n || t < 1 || t > self.m {
            return Err(PanelError::OutOfRange {
                stratum: i,
                period: t,
                n: self.n,
                m: self.m,
            });
        }
        Ok(self.z_unchecked(i, t))
    }

    #[inline]
    pub(crate) fn z_unchecked(&self, i: usize, t: usize) -> ZTuple<'_> {
        let d = self.dim_y;
        let s = self.series(i);
        let window = &s[(t - 1) * d..(t + self.p) * d];
        let x = &self.covariates(i)[(t - 1) * self.dim_x..t * self.dim_x];
        ZTuple {
            window,
            x,
            dim_y: d,
            lags: self.p,
        }
    }

    /// Dataset restricted to the listed strata, in the listed order.
    pub fn subset(&self, strata: &[usize]) -> Self {
        let stride = (self.p + self.m) * self.dim_y;
        let xs = self.m * self.dim_x;
        let mut series = Vec::with_capacity(strata.len() * stride);
        let mut x = Vec::with_capacity(strata.len() * xs);
        let mut labels = Vec::with_capacity(strata.len());
        for &i in strata {
            series.extend_from_slice(self.series(i));
            x.extend_from_slice(self.covariates(i));
            labels.push(self.labels[i].clone());
        }
        Self::from_series(self.m, self.p, self.dim_y, self.dim_x, series, x, labels)
    }

    /// Copy of this dataset with the sample outcomes of every stratum replaced.
    /// Pre-sample values and covariates are kept.
    pub(crate) fn with_series(&self, series: Vec<f64>) -> Self {
        debug_assert_eq!(series.len(), self.series.len());
        Self {
            series,
            ..self.clone()
        }
    }

    /// Reads the CSV format `stratum,period,y,x1..xk` for a model with lag
    /// order `p`. Rows with `period <= 0` are pre-sample values; those older
    /// than `1 - p` are ignored.
    pub fn read_csv<R: Read>(reader: R, p: usize) -> Result<Self, PanelError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| PanelError::Csv {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        if header.len() < 3
            || &header[0] != "stratum"
            || &header[1] != "period"
            || &header[2] != "y"
        {
            return Err(PanelError::Csv {
                line: 1,
                message: "header must start with stratum,period,y".into(),
            });
        }
        let dim_x = header.len() - 3;

        struct Stratum {
            pre: HashMap<i64, f64>,
            obs: HashMap<i64, (f64, Vec<f64>)>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut strata: HashMap<String, Stratum> = HashMap::new();

        for rec in rdr.records() {
            let rec = rec.map_err(|e| PanelError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |message: String| PanelError::Csv { line, message };
            let label = rec[0].to_string();
            let period: i64 = rec[1]
                .parse()
                .map_err(|_| bad(format!("invalid period '{}'", &rec[1])))?;
            let y: f64 = rec[2]
                .parse()
                .map_err(|_| bad(format!("invalid outcome '{}'", &rec[2])))?;
            if !y.is_finite() {
                return Err(bad("non-finite outcome".into()));
            }
            let entry = strata.entry(label.clone()).or_insert_with(|| {
                order.push(label.clone());
                Stratum {
                    pre: HashMap::new(),
                    obs: HashMap::new(),
                }
            });
            if period <= 0 {
                if entry.pre.insert(period, y).is_some() {
                    return Err(bad(format!("duplicate period {period} in stratum {label}")));
                }
            } else {
                let mut xs = Vec::with_capacity(dim_x);
                for k in 0..dim_x {
                    let v: f64 = rec[3 + k]
                        .parse()
                        .map_err(|_| bad(format!("invalid covariate '{}'", &rec[3 + k])))?;
                    xs.push(v);
                }
                if entry.obs.insert(period, (y, xs)).is_some() {
                    return Err(bad(format!("duplicate period {period} in stratum {label}")));
                }
            }
        }
        if order.is_empty() {
            return Err(PanelError::Csv {
                line: 1,
                message: "no data rows".into(),
            });
        }
        let m = strata[&order[0]].obs.len();
        let n = order.len();
        let mut y_pre = Vec::with_capacity(n * p);
        let mut y = Vec::with_capacity(n * m);
        let mut x = Vec::with_capacity(n * m * dim_x);
        for label in &order {
            let s = &strata[label];
            if s.obs.len() != m {
                return Err(PanelError::Shape(format!(
                    "unbalanced panel: stratum {label} has {} periods, expected {m}",
                    s.obs.len()
                )));
            }
            for t in (1 - p as i64)..=0 {
                match s.pre.get(&t) {
                    Some(v) => y_pre.push(*v),
                    None => {
                        return Err(PanelError::Shape(format!(
                            "stratum {label} lacks pre-sample period {t} required by lag order {p}"
                        )))
                    }
                }
            }
            for t in 1..=m as i64 {
                match s.obs.get(&t) {
                    Some((v, xs)) => {
                        y.push(*v);
                        x.extend_from_slice(xs);
                    }
                    None => {
                        return Err(PanelError::Shape(format!(
                            "stratum {label} lacks period {t}"
                        )))
                    }
                }
            }
        }
        Self::new(n, m, p, 1, dim_x, &y_pre, &y, &x)?.with_labels(order)
    }

    /// Writes the dataset in the format accepted by [`PanelDataset::read_csv`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        if self.dim_y != 1 {
            return Err(PanelError::Dimension(
                "csv export supports scalar outcomes only".into(),
            ));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["stratum".to_string(), "period".into(), "y".into()];
        header.extend((1..=self.dim_x).map(|k| format!("x{k}")));
        let csv_err = |e: csv::Error| PanelError::Csv {
            line: 0,
            message: e.to_string(),
        };
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n {
            let label = &self.labels[i];
            for (k, v) in self.initial_conditions(i).iter().enumerate() {
                let period = k as i64 + 1 - self.p as i64;
                let mut row = vec![label.clone(), period.to_string(), v.to_string()];
                row.extend(std::iter::repeat_n(String::new(), self.dim_x));
                w.write_record(&row).map_err(csv_err)?;
            }
            let xs = self.covariates(i);
            for (t, v) in self.outcomes(i).iter().enumerate() {
                let mut row = vec![label.clone(), (t + 1).to_string(), v.to_string()];
                row.extend(
                    xs[t * self.dim_x..(t + 1) * self.dim_x]
                        .iter()
                        .map(|c| c.to_string()),
                );
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The observation tuple `z_it = (y_it, y_it-1, ..., y_it-p, x_it)`.
#[derive(Debug, Clone, Copy)]
pub struct ZTuple<'a> {
    /// Outcomes from lag `p` up to the current period, oldest first.
    window: &'a [f64],
    x: &'a [f64],
    dim_y: usize,
    lags: usize,
}

impl<'a> ZTuple<'a> {
    pub fn y(&self) -> &'a [f64] {
        &self.window[self.lags * self.dim_y..]
    }

    /// The `k`-th lag, `1 <= k <= p`.
    pub fn lag(&self, k: usize) -> &'a [f64] {
        assert!(k >= 1 && k <= self.lags, "lag {k} outside 1..={}", self.lags);
        let start = (self.lags - k) * self.dim_y;
        &self.window[start..start + self.dim_y]
    }

    pub fn x(&self) -> &'a [f64] {
        self.x
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    /// Lagged outcomes, oldest first.
    pub fn history(&self) -> &'a [f64] {
        &self.window[..self.lags * self.dim_y]
    }
}

/// `theta = (phi, eta_1, ..., eta_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub phi: Vec<f64>,
    /// Fixed effects, stratum-major, `dim_eta` values per stratum.
    pub eta: Vec<f64>,
    pub dim_eta: usize,
}

impl ParameterPoint {
    pub fn new(phi: Vec<f64>, eta: Vec<f64>, dim_eta: usize) -> Result<Self, PanelError> {
        if phi.is_empty() || dim_eta == 0 {
            return Err(PanelError::Dimension(
                "parameter blocks must be non-empty".into(),
            ));
        }
        if eta.len() % dim_eta != 0 {
            return Err(PanelError::Dimension(format!(
                "{} effect values is not a multiple of dim_eta = {dim_eta}",
                eta.len()
            )));
        }
        Ok(Self { phi, eta, dim_eta })
    }

    pub fn zeros(dim_phi: usize, dim_eta: usize, n: usize) -> Self {
        Self {
            phi: vec![0.0; dim_phi],
            eta: vec![0.0; n * dim_eta],
            dim_eta,
        }
    }

    pub fn n(&self) -> usize {
        self.eta.len() / self.dim_eta
    }

    pub fn dim_phi(&self) -> usize {
        self.phi.len()
    }

    pub fn eta_i(&self, i: usize) -> &[f64] {
        &self.eta[i * self.dim_eta..(i + 1) * self.dim_eta]
    }

    pub fn eta_i_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.eta[i * self.dim_eta..(i + 1) * self.dim_eta]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.phi.clone();
        v.extend_from_slice(&self.eta);
        v
    }

    pub fn unflatten(
        flat: &[f64],
        dim_phi: usize,
        dim_eta: usize,
    ) -> Result<Self, PanelError> {
        if flat.len() < dim_phi {
            return Err(PanelError::Dimension("flat vector shorter than phi".into()));
        }
        Self::new(flat[..dim_phi].to_vec(), flat[dim_phi..].to_vec(), dim_eta)
    }

    /// Point restricted to the listed strata.
    pub fn subset(&self, strata: &[usize]) -> Self {
        let mut eta = Vec::with_capacity(strata.len() * self.dim_eta);
        for &i in strata {
            eta.extend_from_slice(self.eta_i(i));
        }
        Self {
            phi: self.phi.clone(),
            eta,
            dim_eta: self.dim_eta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().chain(&self.eta).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim_phi: usize,
    pub dim_eta: usize,
    pub dim_y: usize,
    pub dim_x: usize,
    pub lags: usize,
}

/// Per-observation log-density with its first and second derivatives.
/// Matrices are row-major; `h_phieta` is `dim_phi x dim_eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsDerivatives {
    pub value: f64,
    pub d_phi: Vec<f64>,
    pub d_eta: Vec<f64>,
    pub h_phiphi: Vec<f64>,
    pub h_phieta: Vec<f64>,
    pub h_etaeta: Vec<f64>,
}

impl ObsDerivatives {
    pub fn new(dims: ModelDims) -> Self {
        let (a, b) = (dims.dim_phi, dims.dim_eta);
        Self {
            value: 0.0,
            d_phi: vec![0.0; a],
            d_eta: vec![0.0; b],
            h_phiphi: vec![0.0; a * a],
            h_phieta: vec![0.0; a * b],
            h_etaeta: vec![0.0; b * b],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self
                .d_phi
                .iter()
                .chain(&self.d_eta)
                .chain(&self.h_phiphi)
                .chain(&self.h_phieta)
                .chain(&self.h_etaeta)
                .all(|v| v.is_finite())
    }
}

/// A transition density `f(y_it | y_it-1, ..., y_it-p, x_it; phi, eta_i)`
/// together with its derivatives and a sampler.
///
/// Implementations must be stateless: all randomness comes in through the
/// injected generator.
pub trait PanelModel: Send + Sync {
    fn name(&self) -> &'static str;

    fn dims(&self) -> ModelDims;

    /// `l(phi, eta_i | z_it)`.
    fn loglik(&self, phi: &[f64], eta: &[f64], z: &ZTuple<'_>) -> f64;

    /// Writes the log-density and its derivatives up to second order in
    /// `(phi, eta_i)` into `out`.
    fn derivatives(&self, phi: &[f64], eta: &[f64], z: &ZTuple<'_>, out: &mut ObsDerivatives);

    /// Draws `y_it` given the lagged outcomes (`history`, oldest first) and
    /// `x_it`, writing `dim_y` values into `out`.
    fn sample_transition(
        &self,
        phi: &[f64],
        eta: &[f64],
        history: &[f64],
        x: &[f64],
        rng: &mut dyn RngCore,
        out: &mut [f64],
    );

    /// False when the data of stratum `i` leave `eta_i` unidentified.
    fn stratum_admissible(&self, _data: &PanelDataset, _i: usize) -> bool {
        true
    }

    /// Parameter-space restriction on `phi` (e.g. a positive variance).
    fn phi_admissible(&self, _phi: &[f64]) -> bool {
        true
    }

    /// Whether stratum-level estimates can run off to infinity, which makes
    /// the divergence cap of the solver meaningful.
    fn effects_can_diverge(&self) -> bool {
        true
    }

    /// A reasonable starting point for the solver.
    fn default_start(&self, data: &PanelDataset) -> ParameterPoint {
        let d = self.dims();
        ParameterPoint::zeros(d.dim_phi, d.dim_eta, data.n())
    }
}

pub(crate) fn check_dims(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
) -> Result<(), PanelError> {
    let d = model.dims();
    if d.dim_y != data.dim_y() || d.dim_x != data.dim_x() || d.lags != data.lags() {
        return Err(PanelError::Dimension(format!(
            "model {} expects (dim_y, dim_x, p) = ({}, {}, {}), data has ({}, {}, {})",
            model.name(),
            d.dim_y,
            d.dim_x,
            d.lags,
            data.dim_y(),
            data.dim_x(),
            data.lags()
        )));
    }
    if theta.dim_phi() != d.dim_phi || theta.dim_eta != d.dim_eta || theta.n() != data.n() {
        return Err(PanelError::Dimension(format!(
            "parameter point has dim_phi = {}, dim_eta = {}, n = {}; expected {}, {}, {}",
            theta.dim_phi(),
            theta.dim_eta,
            theta.n(),
            d.dim_phi,
            d.dim_eta,
            data.n()
        )));
    }
    Ok(())
}

/// Log-likelihood of a single stratum.
pub fn stratum_loglik(
    model: &dyn PanelModel,
    data: &PanelDataset,
    phi: &[f64],
    eta: &[f64],
    i: usize,
) -> Result<f64, PanelError> {
    let mut sum = 0.0;
    for t in 1..=data.m() {
        let v = model.loglik(phi, eta, &data.z_unchecked(i, t));
        if !v.is_finite() {
            return Err(PanelError::NonFinite {
                stratum: i,
                period: t,
            });
        }
        sum += v;
    }
    Ok(sum)
}

/// `sum_i sum_t l(phi, eta_i | z_it)`.
pub fn total_loglik(
    model: &dyn PanelModel,
    data: &PanelDataset,
    theta: &ParameterPoint,
) -> Result<f64, PanelError> {
    check_dims(model, data, theta)?;
    let mut total = 0.0;
    for i in 0..data.n() {
        total += stratum_loglik(model, data, &theta.phi, theta.eta_i(i), i)?;
    }
    Ok(total)
}
