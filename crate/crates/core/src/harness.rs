//! Seeded Monte Carlo experiments: coverage and average length of confidence
//! intervals over repeated simulated panels.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bootstrap::{run_replicates, BootstrapConfig, BootstrapRun, DeltaMethod, Side};
use crate::inference::{sigma_hat_for_fit, AverageEffect, NormalSecondMoment, SecondMoment};
use crate::models::{dynamic_logit, normal_means, InitialCondition, ModelError, ModelKind};
use crate::newton::{fit, FitOptions};
use crate::oracle::special::normal_quantile;
use crate::panel::PanelDataset;
use crate::rng::StreamKey;

/// Child index of a replication key reserved for simulating its data.
const DATA_STREAM: u64 = u64::MAX;
/// Child index of a replication key under which bootstrap replicate streams live.
const BOOT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{failed} of {reps} replications failed (first: {first})")]
    TooManyFailures { failed: usize, reps: usize, first: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRule {
    Zeros,
    /// `eta_i0 = i / n`, `i = 1..n`.
    IOverN,
}

impl EtaRule {
    pub fn effects(self, n: usize) -> Vec<f64> {
        match self {
            EtaRule::Zeros => vec![0.0; n],
            EtaRule::IOverN => (1..=n).map(|i| i as f64 / n as f64).collect(),
        }
    }

    /// `lim n^{-1} sum_i eta_i0^2`.
    pub fn limit_second_moment(self) -> f64 {
        match self {
            EtaRule::Zeros => 0.0,
            EtaRule::IOverN => 1.0 / 3.0,
        }
    }
}

/// The quantity the intervals are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Phi,
    /// `n^{-1} sum_i eta_i^2`.
    SecondMoment,
}

/// Interval methods. For `phi`: the Wald interval with the plug-in variance,
/// the percentile interval, and the percentile-t interval. For the second
/// moment the first is the normal interval with the bootstrap standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SHat,
    EStar,
    SStar,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SHat, Method::EStar, Method::SStar];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SHat => "s-hat",
            Method::EStar => "e-star",
            Method::SStar => "s-star",
        }
    }
}

fn default_level() -> f64 {
    0.95
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_init() -> InitialCondition {
    InitialCondition::Stationary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub target: Target,
    pub phi0: f64,
    pub eta_rule: EtaRule,
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_init")]
    pub init: InitialCondition,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_level")]
    pub level: f64,
    pub reps: usize,
    pub boot: usize,
    #[serde(default)]
    pub seed: u64,
    /// Thread budget; results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    /// Dynamic logit design with `eta_i0 = 0` and stationary initial outcomes.
    pub fn table2(phi0: f64, n: usize, m: usize, reps: usize, boot: usize, seed: u64) -> Self {
        Self {
            model: ModelKind::DynamicLogit,
            target: Target::Phi,
            phi0,
            eta_rule: EtaRule::Zeros,
            n,
            m,
            init: InitialCondition::Stationary,
            methods: default_methods(),
            level: 0.95,
            reps,
            boot,
            seed,
            threads: None,
        }
    }

    /// Normal-means design for the second moment of `eta_i0 = i / n`.
    pub fn table3(n: usize, m: usize, reps: usize, boot: usize, seed: u64) -> Self {
        Self {
            model: ModelKind::NormalMeans,
            target: Target::SecondMoment,
            phi0: 1.0,
            eta_rule: EtaRule::IOverN,
            n,
            m,
            init: InitialCondition::Stationary,
            methods: default_methods(),
            level: 0.95,
            reps,
            boot,
            seed,
            threads: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.reps < 1 {
            return err("reps must be at least 1".into());
        }
        if self.boot < crate::bootstrap::MIN_REPLICATES && self.needs_bootstrap() {
            return err(format!("boot must be at least {}", crate::bootstrap::MIN_REPLICATES));
        }
        if self.n < 1 || self.m < 2 {
            return err(format!("need n >= 1 and m >= 2, got n = {}, m = {}", self.n, self.m));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return err(format!("level {} outside (0, 1)", self.level));
        }
        if !self.phi0.is_finite() || (self.model == ModelKind::NormalMeans && self.phi0 <= 0.0) {
            return err(format!("invalid phi0 = {}", self.phi0));
        }
        if self.methods.is_empty() {
            return err("no methods requested".into());
        }
        if self.threads == Some(0) {
            return err("threads must be positive".into());
        }
        Ok(())
    }

    fn needs_bootstrap(&self) -> bool {
        self.target == Target::SecondMoment || self.methods.iter().any(|m| *m != Method::SHat)
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the thread budget.
    pub fn hash(&self) -> String {
        let canonical = Self {
            threads: None,
            ..self.clone()
        };
        config_hash(&canonical)
    }

    fn effect(&self) -> &'static dyn AverageEffect {
        match self.model {
            ModelKind::NormalMeans => &NormalSecondMoment,
            ModelKind::DynamicLogit => &SecondMoment,
        }
    }
}

/// Every design of the dynamic logit coverage table.
pub fn table2_grid(reps: usize, boot: usize, seed: u64) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for phi0 in [0.5, 1.0] {
        for n in [100, 250] {
            for m in [10, 20] {
                out.push(ExperimentConfig::table2(phi0, n, m, reps, boot, seed));
            }
        }
    }
    out
}

/// Every design of the second-moment coverage table.
pub fn table3_grid(reps: usize, boot: usize, seed: u64) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for n in [50, 100] {
        for m in [10, 20, 50] {
            out.push(ExperimentConfig::table3(n, m, reps, boot, seed));
        }
    }
    out
}

/// Short hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// `n^{-1} sum_i eta_i0^2` for the finite design (or `phi_0` for the
/// common parameter).
pub fn truth_delta(cfg: &ExperimentConfig) -> f64 {
    let eta = cfg.eta_rule.effects(cfg.n);
    eta.iter().map(|e| e * e).sum::<f64>() / cfg.n as f64
}

fn truth(cfg: &ExperimentConfig) -> f64 {
    match cfg.target {
        Target::Phi => cfg.phi0,
        Target::SecondMoment => truth_delta(cfg),
    }
}

fn truth_limit(cfg: &ExperimentConfig) -> Option<f64> {
    match cfg.target {
        Target::Phi => None,
        Target::SecondMoment => Some(cfg.eta_rule.limit_second_moment()),
    }
}

pub fn simulate_design(cfg: &ExperimentConfig, key: StreamKey) -> Result<PanelDataset, ModelError> {
    let eta = cfg.eta_rule.effects(cfg.n);
    let mut rng = key.rng();
    match cfg.model {
        ModelKind::NormalMeans => normal_means::simulate(cfg.phi0, &eta, cfg.m, &mut rng),
        ModelKind::DynamicLogit => dynamic_logit::simulate(cfg.phi0, &eta, cfg.m, cfg.init, &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub lower: f64,
    pub upper: f64,
    pub covers: bool,
    pub covers_limit: Option<bool>,
    pub dropped_strata: usize,
}

/// What happened in one Monte Carlo replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub error: Option<String>,
    pub estimate: Option<f64>,
    pub outcomes: Vec<MethodOutcome>,
    /// Methods that failed inside an otherwise successful replication.
    pub method_failures: Vec<(Method, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub model: ModelKind,
    pub target: Target,
    pub phi0: f64,
    pub n: usize,
    pub m: usize,
    pub eta_rule: EtaRule,
    pub method: Method,
    pub level: f64,
    pub reps: usize,
    pub boot: usize,
    pub seed: u64,
    pub truth: f64,
    pub coverage: f64,
    pub coverage_limit: Option<f64>,
    pub mc_se: f64,
    pub avg_length: f64,
    pub failures: usize,
    pub config_hash: String,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub config_hash: String,
    pub rows: Vec<ExperimentRow>,
    pub records: Vec<ReplicationRecord>,
}

fn one_replication(cfg: &ExperimentConfig, master: StreamKey, index: usize) -> ReplicationRecord {
    let mut rec = ReplicationRecord {
        index,
        error: None,
        estimate: None,
        outcomes: Vec::new(),
        method_failures: Vec::new(),
    };
    let key = master.child(index as u64);
    let model = cfg.model.model();
    let data = match simulate_design(cfg, key.child(DATA_STREAM)) {
        Ok(d) => d,
        Err(e) => {
            rec.error = Some(format!("simulate: {e}"));
            return rec;
        }
    };
    let opts = FitOptions::default();
    let f = match fit(model, &data, &model.default_start(&data), &opts) {
        Ok(f) if f.converged => f,
        Ok(_) => {
            rec.error = Some("fit did not converge".into());
            return rec;
        }
        Err(e) => {
            rec.error = Some(format!("fit: {e}"));
            return rec;
        }
    };
    let dropped = f.dropped_strata.len();
    let effect = cfg.effect();

    let run: Option<BootstrapRun> = if cfg.needs_bootstrap() {
        let bcfg = BootstrapConfig {
            replicates: cfg.boot,
            fit: opts,
            ..BootstrapConfig::default()
        };
        let eff = (cfg.target == Target::SecondMoment).then_some(effect);
        match run_replicates(model, &data, &f, eff, &bcfg, key.child(BOOT_STREAM)) {
            Ok(r) => Some(r),
            Err(e) => {
                rec.error = Some(format!("bootstrap: {e}"));
                return rec;
            }
        }
    } else {
        None
    };

    let truth = truth(cfg);
    let limit = truth_limit(cfg);
    let z = normal_quantile(1.0 - (1.0 - cfg.level) / 2.0);
    rec.estimate = match cfg.target {
        Target::Phi => Some(f.theta.phi[0]),
        Target::SecondMoment => run.as_ref().and_then(|r| r.delta_hat),
    };

    for &method in &cfg.methods {
        let interval = match (cfg.target, method) {
            (Target::Phi, Method::SHat) => sigma_hat_for_fit(model, &data, &f)
                .map(|s| {
                    let se = s.standard_error(&[1.0]);
                    let c = f.theta.phi[0];
                    (c - z * se, c + z * se)
                })
                .map_err(|e| e.to_string()),
            (Target::Phi, Method::EStar) => run_ref(&run)
                .percentile(&[1.0], cfg.level, Side::TwoSided)
                .map(|r| (r.lower, r.upper))
                .map_err(|e| e.to_string()),
            (Target::Phi, Method::SStar) => run_ref(&run)
                .percentile_t(&[1.0], cfg.level, Side::TwoSided)
                .map(|r| (r.lower, r.upper))
                .map_err(|e| e.to_string()),
            (Target::SecondMoment, m) => {
                let dm = match m {
                    Method::SHat => DeltaMethod::Normal,
                    Method::EStar => DeltaMethod::Percentile,
                    Method::SStar => DeltaMethod::PercentileT,
                };
                run_ref(&run).delta(cfg.level, dm).map(|r| (r.lower, r.upper)).map_err(|e| e.to_string())
            }
        };
        match interval {
            Ok((lower, upper)) => rec.outcomes.push(MethodOutcome {
                method,
                lower,
                upper,
                covers: lower <= truth && truth <= upper,
                covers_limit: limit.map(|l| lower <= l && l <= upper),
                dropped_strata: dropped,
            }),
            Err(e) => rec.method_failures.push((method, e)),
        }
    }
    rec
}

fn run_ref(run: &Option<BootstrapRun>) -> &BootstrapRun {
    run.as_ref().expect("bootstrap run exists whenever a bootstrap method is requested")
}

/// Largest tolerated share of failed replications.
pub const MAX_REPLICATION_FAILURE_SHARE: f64 = 0.05;

/// Runs `cfg.reps` replications in parallel. Replication `r` draws from
/// `StreamKey::new(seed).child(r)`, so the output does not depend on the
/// thread budget.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let master = StreamKey::new(cfg.seed);
    let work = || -> Vec<ReplicationRecord> {
        (0..cfg.reps).into_par_iter().map(|r| one_replication(cfg, master, r)).collect()
    };
    let records = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| HarnessError::ThreadPool(e.to_string()))?
            .install(work),
        None => work(),
    };
    let failed: Vec<&ReplicationRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    if failed.len() as f64 > MAX_REPLICATION_FAILURE_SHARE * cfg.reps as f64 {
        return Err(HarnessError::TooManyFailures {
            failed: failed.len(),
            reps: cfg.reps,
            first: failed[0].error.clone().unwrap_or_default(),
        });
    }
    let hash = cfg.hash();
    let wall = started.elapsed().as_secs_f64();
    let rows = cfg
        .methods
        .iter()
        .map(|&method| aggregate(cfg, &records, method, &hash, wall))
        .collect();
    Ok(ExperimentOutput {
        config_hash: hash,
        rows,
        records,
    })
}

fn aggregate(cfg: &ExperimentConfig, records: &[ReplicationRecord], method: Method, hash: &str, wall: f64) -> ExperimentRow {
    let outcomes: Vec<&MethodOutcome> = records.iter().flat_map(|r| r.outcomes.iter()).filter(|o| o.method == method).collect();
    let failures = records.len() - outcomes.len();
    let k = outcomes.len().max(1) as f64;
    let coverage = outcomes.iter().filter(|o| o.covers).count() as f64 / k;
    let coverage_limit = truth_limit(cfg).map(|_| outcomes.iter().filter(|o| o.covers_limit == Some(true)).count() as f64 / k);
    let avg_length = outcomes.iter().map(|o| o.upper - o.lower).sum::<f64>() / k;
    ExperimentRow {
        model: cfg.model,
        target: cfg.target,
        phi0: cfg.phi0,
        n: cfg.n,
        m: cfg.m,
        eta_rule: cfg.eta_rule,
        method,
        level: cfg.level,
        reps: cfg.reps,
        boot: cfg.boot,
        seed: cfg.seed,
        truth: truth(cfg),
        coverage,
        coverage_limit,
        mc_se: (coverage * (1.0 - coverage) / k).sqrt(),
        avg_length,
        failures,
        config_hash: hash.to_string(),
        wall_time_secs: wall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(HarnessError::Config(format!("unknown format '{other}'"))),
        }
    }
}

#[derive(Serialize)]
struct JsonTable<'a> {
    config_hashes: Vec<&'a str>,
    rows: &'a [ExperimentRow],
}

/// Writes rows in the requested format. CSV and JSON carry every field
/// except the wall time, so they are reproducible byte for byte.
pub fn emit_table<W: Write>(rows: &[ExperimentRow], format: TableFormat, mut w: W) -> Result<(), HarnessError> {
    match format {
        TableFormat::Csv => {
            let mut wr = csv::Writer::from_writer(w);
            for r in rows {
                wr.serialize(r)?;
            }
            wr.flush()?;
        }
        TableFormat::Json => {
            let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
            hashes.dedup();
            serde_json::to_writer_pretty(&mut w, &JsonTable { config_hashes: hashes, rows })?;
            writeln!(w)?;
        }
        TableFormat::Markdown => write_markdown(rows, w)?,
    }
    Ok(())
}

pub fn read_csv_rows<R: std::io::Read>(r: R) -> Result<Vec<ExperimentRow>, HarnessError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Design columns, then a coverage block and a length block with one column
/// per method.
fn write_markdown<W: Write>(rows: &[ExperimentRow], mut w: W) -> Result<(), HarnessError> {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    type Design = (String, String, u64, usize, usize);
    let mut designs: Vec<Design> = Vec::new();
    let mut cells: BTreeMap<(Design, Method), &ExperimentRow> = BTreeMap::new();
    for r in rows {
        let d: Design = (r.model.to_string(), format!("{:?}", r.target), r.phi0.to_bits(), r.n, r.m);
        if !designs.contains(&d) {
            designs.push(d.clone());
        }
        cells.insert((d, r.method), r);
    }
    let names: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
    write!(w, "| phi0 | n | m |")?;
    for n in &names {
        write!(w, " coverage {n} |")?;
    }
    for n in &names {
        write!(w, " length {n} |")?;
    }
    writeln!(w)?;
    writeln!(w, "|{}", "---|".repeat(3 + 2 * names.len()))?;
    for d in &designs {
        write!(w, "| {} | {} | {} |", f64::from_bits(d.2), d.3, d.4)?;
        for m in &methods {
            match cells.get(&(d.clone(), *m)) {
                Some(r) => write!(w, " {:.3} |", r.coverage)?,
                None => write!(w, " |")?,
            }
        }
        for m in &methods {
            match cells.get(&(d.clone(), *m)) {
                Some(r) => write!(w, " {:.3} |", r.avg_length)?,
                None => write!(w, " |")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}
