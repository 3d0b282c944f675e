use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use panelboot::bootstrap::{run_replicates, BootstrapConfig, BootstrapError, DeltaMethod, Side, MIN_REPLICATES};
use panelboot::harness::{self, config_hash, EtaRule, ExperimentConfig, HarnessError, TableFormat};
use panelboot::inference::{sigma_hat_for_fit, AverageEffect, InferenceError, NormalSecondMoment, SecondMoment};
use panelboot::oracle::{self, OracleError, PercentileMode, TABLE1_DESIGNS};
use panelboot::{fit, FitError, FitOptions, ModelKind, PanelDataset, PanelError, StreamKey};

/// Fixed-effect panel models: fitting, bootstrap confidence sets, exact
/// oracles and Monte Carlo experiments.
#[derive(Parser, Debug)]
#[command(name = "panelboot", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a panel CSV and print the estimate as JSON.
    Fit(FitArgs),
    /// Bootstrap confidence interval or ellipsoid, printed as JSON.
    BootstrapCi(BootArgs),
    /// Exact computations for the many-normal-means model, as CSV.
    Oracle {
        #[command(subcommand)]
        task: OracleTask,
    },
    /// Monte Carlo coverage experiments.
    Simulate(SimArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Panel CSV with header `stratum,period,y[,x1..]`.
    #[arg(long)]
    data: PathBuf,
    /// normal-means or dynamic-logit.
    #[arg(long)]
    model: ModelKind,
    /// Score-norm tolerance (default 1e-8 * nm).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Echoed for reproducibility; fitting draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default stdout).
    #[serde(skip)]
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CiMethod {
    Percentile,
    PercentileT,
    /// Normal interval with the bootstrap standard deviation (second moment only).
    Normal,
    Ellipsoid,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EffectArg {
    /// Interval for the common parameter.
    None,
    /// Interval for the second moment of the fixed effects.
    SecondMoment,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SideArg {
    TwoSided,
    Lower,
    Upper,
}

#[derive(Args, Debug, Serialize)]
struct BootArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = CiMethod::Percentile)]
    method: CiMethod,
    #[arg(long, value_enum, default_value_t = EffectArg::None)]
    effect: EffectArg,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value_t = SideArg::TwoSided)]
    side: SideArg,
    /// Contrast vector, comma separated (default: first unit vector).
    #[arg(long, value_delimiter = ',')]
    contrast: Option<Vec<f64>>,
    /// Bootstrap replicates.
    #[arg(long, short = 'B', default_value_t = 999)]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[serde(skip)]
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    FirstOrder,
    Full,
}

#[derive(Subcommand, Debug)]
enum OracleTask {
    /// Exact coverage of the two-sided intervals for the variance.
    Table1 {
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Where the percentile interval's bootstrap law is evaluated.
        #[arg(long, value_enum, default_value_t = ModeArg::FirstOrder)]
        mode: ModeArg,
        /// Designs as `NxM`, comma separated (default: 10x10,20x10,40x10,100x10).
        #[arg(long, value_delimiter = ',')]
        designs: Option<Vec<String>>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Densities and distribution functions of the estimator, its bootstrap
    /// analogue and the studentized statistics; one CSV per curve.
    Figure1 {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        phi0: f64,
        #[arg(long, default_value_t = 401)]
        points: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Exact bias and variance of the plug-in second moment.
    SecondMoment {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        phi0: f64,
        #[arg(long, value_enum, default_value_t = EtaArg::IOverN)]
        eta_rule: EtaArg,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EtaArg {
    Zeros,
    IOverN,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Dynamic logit, coverage for the state-dependence parameter.
    Table2,
    /// Normal means, coverage for the second moment of the effects.
    Table3,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Markdown,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Run every design of a built-in table.
    #[arg(value_enum, required_unless_present = "config", conflicts_with = "config")]
    preset: Option<Preset>,
    /// TOML experiment description (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Monte Carlo replications per design (presets only).
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Bootstrap replicates per replication (presets only).
    #[arg(long, default_value_t = 199)]
    boot: usize,
    /// Master seed (presets only; a config file carries its own).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write per-replication records as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::Csv { .. } | PanelError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Panel(p) => p.into(),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<BootstrapError> for CliError {
    fn from(e: BootstrapError) -> Self {
        match e {
            BootstrapError::BadLevel(_) | BootstrapError::TooFewReplicates(_) => CliError::Usage(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Parameter(m) => CliError::Usage(m),
            OracleError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Usage(m),
            HarnessError::Io(_) | HarnessError::Csv(_) | HarnessError::Json(_) => CliError::Io(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panelboot: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Numerical(e.to_string()))?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::BootstrapCi(a) => cmd_bootstrap_ci(a),
        Command::Oracle { task } => cmd_oracle(task),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn echo(seed: u64, hash: &str) {
    eprintln!("seed: {seed}");
    eprintln!("config hash: {hash}");
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load(a: &DataArgs) -> Result<PanelDataset, CliError> {
    let file = File::open(&a.data).map_err(|e| CliError::Io(format!("{}: {e}", a.data.display())))?;
    let data = PanelDataset::read_csv(io::BufReader::new(file), a.model.model().dims().lags)
        .map_err(|e| CliError::Io(format!("{}: {e}", a.data.display())))?;
    Ok(data)
}

fn fit_options(a: &DataArgs) -> FitOptions {
    FitOptions {
        tol_score: a.tol,
        max_iter: a.max_iter,
        ..FitOptions::default()
    }
}

#[derive(Serialize)]
struct FitReport {
    model: ModelKind,
    n: usize,
    m: usize,
    converged: bool,
    iterations: usize,
    restarts: usize,
    score_norm: f64,
    loglik: f64,
    phi: Vec<f64>,
    /// Per stratum, `null` for dropped strata.
    eta: Vec<Option<Vec<f64>>>,
    dropped_strata: Vec<String>,
    sigma_hat: Option<Vec<f64>>,
    std_errors: Option<Vec<f64>>,
    seed: u64,
    config_hash: String,
}

fn cmd_fit(a: FitArgs) -> Result<(), CliError> {
    let hash = config_hash(&a);
    echo(a.seed, &hash);
    let data = load(&a.data)?;
    let model = a.data.model.model();
    let f = fit(model, &data, &model.default_start(&data), &fit_options(&a.data))?;
    let sigma = if f.converged {
        Some(sigma_hat_for_fit(model, &data, &f)?)
    } else {
        None
    };
    let dp = f.theta.dim_phi();
    let eta = (0..data.n())
        .map(|i| {
            let e = f.theta.eta_i(i);
            e.iter().all(|v| v.is_finite()).then(|| e.to_vec())
        })
        .collect();
    let report = FitReport {
        model: a.data.model,
        n: data.n(),
        m: data.m(),
        converged: f.converged,
        iterations: f.iterations,
        restarts: f.restarts,
        score_norm: f.score_norm,
        loglik: f.loglik,
        phi: f.theta.phi.clone(),
        eta,
        dropped_strata: f.dropped_strata.iter().map(|&i| data.labels()[i].clone()).collect(),
        std_errors: sigma.as_ref().map(|s| {
            (0..dp)
                .map(|k| {
                    let mut c = vec![0.0; dp];
                    c[k] = 1.0;
                    s.standard_error(&c)
                })
                .collect()
        }),
        sigma_hat: sigma.map(|s| s.matrix),
        seed: a.seed,
        config_hash: hash,
    };
    write_json(&report, a.output.as_deref())?;
    if !f.converged {
        return Err(CliError::Numerical(format!(
            "no convergence after {} iterations (score norm {:e})",
            f.iterations, f.score_norm
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CiReport<T: Serialize> {
    model: ModelKind,
    estimate: f64,
    result: T,
    seed: u64,
    config_hash: String,
}

fn cmd_bootstrap_ci(a: BootArgs) -> Result<(), CliError> {
    let hash = config_hash(&a);
    echo(a.seed, &hash);
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Usage(format!("--level {} outside (0, 1)", a.level)));
    }
    if a.boot < MIN_REPLICATES {
        return Err(CliError::Usage(format!("--boot must be at least {MIN_REPLICATES}")));
    }
    let data = load(&a.data)?;
    let kind = a.data.model;
    let model = kind.model();
    let opts = fit_options(&a.data);
    let f = fit(model, &data, &model.default_start(&data), &opts)?;
    if !f.converged {
        return Err(CliError::Numerical("fit did not converge".into()));
    }
    let dp = f.theta.dim_phi();
    let c = a.contrast.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; dp];
        e[0] = 1.0;
        e
    });
    if c.len() != dp {
        return Err(CliError::Usage(format!("contrast has {} entries, model has {dp} parameters", c.len())));
    }
    let cfg = BootstrapConfig {
        replicates: a.boot,
        fit: opts,
        ..BootstrapConfig::default()
    };
    let key = StreamKey::new(a.seed);
    let side = match a.side {
        SideArg::TwoSided => Side::TwoSided,
        SideArg::Lower => Side::Lower,
        SideArg::Upper => Side::Upper,
    };
    let out = a.output.as_deref();
    match a.effect {
        EffectArg::SecondMoment => {
            let effect: &dyn AverageEffect = match kind {
                ModelKind::NormalMeans => &NormalSecondMoment,
                ModelKind::DynamicLogit => &SecondMoment,
            };
            let method = match a.method {
                CiMethod::Percentile => DeltaMethod::Percentile,
                CiMethod::PercentileT => DeltaMethod::PercentileT,
                CiMethod::Normal => DeltaMethod::Normal,
                CiMethod::Ellipsoid => return Err(CliError::Usage("ellipsoid applies to the common parameter only".into())),
            };
            if !matches!(side, Side::TwoSided) {
                return Err(CliError::Usage("second-moment intervals are two-sided".into()));
            }
            let run = run_replicates(model, &data, &f, Some(effect), &cfg, key)?;
            let report = run.delta(a.level, method)?;
            let estimate = run.delta_hat.ok_or_else(|| CliError::Numerical("effect not estimable".into()))?;
            write_json(&CiReport { model: kind, estimate, result: report, seed: a.seed, config_hash: hash }, out)
        }
        EffectArg::None => {
            let estimate: f64 = c.iter().zip(&f.theta.phi).map(|(a, b)| a * b).sum();
            let run = run_replicates(model, &data, &f, None, &cfg, key)?;
            match a.method {
                CiMethod::Percentile => {
                    let r = run.percentile(&c, a.level, side)?;
                    write_json(&CiReport { model: kind, estimate, result: r, seed: a.seed, config_hash: hash }, out)
                }
                CiMethod::PercentileT => {
                    let r = run.percentile_t(&c, a.level, side)?;
                    write_json(&CiReport { model: kind, estimate, result: r, seed: a.seed, config_hash: hash }, out)
                }
                CiMethod::Ellipsoid => {
                    let cm = nalgebra_column(&c);
                    let r = run.ellipsoid(&cm, a.level)?;
                    write_json(&CiReport { model: kind, estimate, result: r, seed: a.seed, config_hash: hash }, out)
                }
                CiMethod::Normal => Err(CliError::Usage("the normal interval applies to --effect second-moment".into())),
            }
        }
    }
}

fn nalgebra_column(c: &[f64]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_column_slice(c.len(), 1, c)
}

fn parse_designs(list: &[String]) -> Result<Vec<(usize, usize)>, CliError> {
    list.iter()
        .map(|s| {
            let (n, m) = s
                .split_once('x')
                .ok_or_else(|| CliError::Usage(format!("design '{s}' is not of the form NxM")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad design '{s}'")));
            Ok((parse(n)?, parse(m)?))
        })
        .collect()
}

fn cmd_oracle(task: OracleTask) -> Result<(), CliError> {
    match task {
        OracleTask::Table1 { level, mode, designs, output } => {
            let designs = match designs {
                Some(d) => parse_designs(&d)?,
                None => TABLE1_DESIGNS.to_vec(),
            };
            let mode = match mode {
                ModeArg::FirstOrder => PercentileMode::FirstOrder,
                ModeArg::Full => PercentileMode::Full,
            };
            echo(0, &config_hash(&("table1", level, mode, &designs)));
            if !(level > 0.0 && level < 1.0) {
                return Err(CliError::Usage(format!("--level {level} outside (0, 1)")));
            }
            let rows = oracle::table1(&designs, level, mode)?;
            let mut w = sink(output.as_deref())?;
            oracle::write_table1_csv(&rows, &mut w)?;
            w.flush()?;
        }
        OracleTask::Figure1 { n, m, phi0, points, out_dir } => {
            echo(0, &config_hash(&("figure1", n, m, phi0, points)));
            let curves = oracle::figure1_curves(n, m, phi0, points)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
            for c in &curves {
                let path = out_dir.join(format!("{}.csv", c.name));
                let mut w = sink(Some(&path))?;
                c.write_csv(&mut w)?;
                w.flush()?;
                eprintln!("wrote {}", path.display());
            }
        }
        OracleTask::SecondMoment { n, m, phi0, eta_rule, output } => {
            let rule = match eta_rule {
                EtaArg::Zeros => EtaRule::Zeros,
                EtaArg::IOverN => EtaRule::IOverN,
            };
            echo(0, &config_hash(&("second-moment", n, m, phi0, rule)));
            let truth = oracle::second_moment_truth(phi0, &rule.effects(n), n, m)?;
            let mut w = sink(output.as_deref())?;
            writeln!(w, "n,m,phi0,delta,bias,variance")?;
            writeln!(w, "{n},{m},{phi0},{},{},{}", truth.delta, truth.bias, truth.variance)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_simulate(a: SimArgs) -> Result<(), CliError> {
    let configs: Vec<ExperimentConfig> = match (&a.config, a.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            vec![ExperimentConfig::from_toml(&text)?]
        }
        (None, Some(Preset::Table2)) => harness::table2_grid(a.reps, a.boot, a.seed),
        (None, Some(Preset::Table3)) => harness::table3_grid(a.reps, a.boot, a.seed),
        (None, None) => return Err(CliError::Usage("give a preset or --config".into())),
    };
    let seed = configs[0].seed;
    let hashes: Vec<String> = configs.iter().map(|c| c.hash()).collect();
    // A single design echoes its own hash; a grid echoes the hash of its members.
    match hashes.as_slice() {
        [one] => echo(seed, one),
        _ => echo(seed, &config_hash(&hashes)),
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for cfg in &configs {
        let out = harness::run_experiment(cfg)?;
        eprintln!(
            "{} phi0={} n={} m={}: done in {:.1}s",
            cfg.model,
            cfg.phi0,
            cfg.n,
            cfg.m,
            out.rows.first().map_or(0.0, |r| r.wall_time_secs)
        );
        rows.extend(out.rows);
        records.push((out.config_hash, out.records));
    }
    let format = match a.format {
        FormatArg::Csv => TableFormat::Csv,
        FormatArg::Json => TableFormat::Json,
        FormatArg::Markdown => TableFormat::Markdown,
    };
    let mut w = sink(a.output.as_deref())?;
    harness::emit_table(&rows, format, &mut w)?;
    w.flush()?;
    if let Some(path) = &a.records {
        let mut w = sink(Some(path))?;
        for (hash, recs) in &records {
            for r in recs {
                serde_json::to_writer(&mut w, &(hash, r))?;
                writeln!(w)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}
