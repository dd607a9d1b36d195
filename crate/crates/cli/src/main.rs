use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dlsem::datasets::{holzinger_grant_white, holzinger_three_factor};
use dlsem::fitstats::fit_statistics;
use dlsem::harness::{bootstrap_fits_with, configure_threads, run_study, uniform_grid, write_study_outputs, VERSION};
use dlsem::inference::standard_errors;
use dlsem::moments::{multivariate_kurtosis, multivariate_skewness};
use dlsem::{
    DataMatrix, Error, FitOptions, FitStatistics, InfoVariant, Method, MethodKind, ModelSpec, MomentSet, SeKind, SeRule,
    SpecFile, StudyConfig,
};

const THREADS_ENV: &str = "DLSEM_THREADS";

#[derive(Parser)]
#[command(name = "dlsem", version, about = "Weighted least squares and ML estimation for confirmatory factor models")]
struct Cli {
    /// Worker threads for simulate and tune (default: $DLSEM_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a data set.
    Fit(FitArgs),
    /// Choose the tuning parameter a by Bollen-Stine bootstrap.
    Tune(TuneArgs),
    /// Run a Monte Carlo study from a JSON config.
    Simulate(SimulateArgs),
    /// Report sample moments of a data set.
    Describe(DescribeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SeChoice {
    Auto,
    Standard,
    Sandwich,
    /// Standard errors from the expected information at the fitted covariance.
    ExpectedModel,
    /// Standard errors from the observed information at the fitted covariance.
    ObservedModel,
    /// Standard errors from the normal-theory information at the sample covariance.
    Sample,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(clap::Args)]
struct Input {
    /// CSV with a header row (default: bundled Holzinger-Swineford Grant-White data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model JSON (default: bundled three-factor model).
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Optimizer {
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    /// Relative parameter-change tolerance.
    #[arg(long, default_value_t = 1e-6)]
    param_tol: f64,
    /// Gauss-Newton decrement tolerance.
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long, default_value_t = 20)]
    step_halvings: usize,
}

impl Optimizer {
    fn options(&self) -> Result<FitOptions, Failure> {
        if self.max_iterations == 0 || !(self.param_tol > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Failure::input("optimizer limits must be positive"));
        }
        Ok(FitOptions {
            max_iterations: self.max_iterations,
            param_tol: self.param_tol,
            grad_tol: self.grad_tol,
            step_halvings: self.step_halvings,
        })
    }
}

#[derive(clap::Args)]
struct FitArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    optimizer: Optimizer,
    #[arg(long, default_value = "ml")]
    method: String,
    /// Tuning parameter in [0, 1] for dls-s, dls-m, rgls-d and rgls-i.
    #[arg(long, default_value_t = 0.5)]
    a: f64,
    #[arg(long, value_enum, default_value = "auto")]
    se: SeChoice,
    #[arg(long, value_enum, default_value = "json")]
    out: OutFormat,
    /// Write to this file instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TuneArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    optimizer: Optimizer,
    #[arg(long, default_value = "dls-m")]
    method: String,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.01")]
    grid: String,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    out: OutFormat,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the RMSE curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct DescribeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    out: OutFormat,
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Dimension(_)
            | Error::InvalidData(_)
            | Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::Io(_)
            | Error::Parse(_) => 2,
            Error::CannotTune(_) => 3,
            _ => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure { code: 4, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn load_data(path: Option<&Path>) -> Result<(DataMatrix, String), Failure> {
    match path {
        Some(p) => Ok((DataMatrix::from_csv_path(p)?, p.display().to_string())),
        None => Ok((holzinger_grant_white()?, "bundled:holzinger_grant_white".to_string())),
    }
}

fn load_spec(path: Option<&Path>) -> Result<(ModelSpec, String), Failure> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            Ok((SpecFile::from_json(&text)?.to_spec()?, p.display().to_string()))
        }
        None => Ok((holzinger_three_factor()?, "bundled:holzinger_three_factor".to_string())),
    }
}

fn load_inputs(input: &Input) -> Result<(DataMatrix, ModelSpec, String, String), Failure> {
    let (x, data_src) = load_data(input.data.as_deref())?;
    let (spec, spec_src) = load_spec(input.spec.as_deref())?;
    let x = x.select(spec.variables())?;
    Ok((x, spec, data_src, spec_src))
}

fn parse_method(name: &str, a: f64) -> Result<Method, Failure> {
    let kind: MethodKind = name.parse()?;
    Ok(Method::new(kind, a)?)
}

fn emit(output: Option<&Path>, text: &str) -> CmdResult {
    match output {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodInfo {
    name: MethodKind,
    a: Option<f64>,
}

#[derive(Serialize)]
struct ParamRow {
    name: String,
    estimate: f64,
    se: Option<f64>,
    z: Option<f64>,
}

#[derive(Serialize)]
struct Convergence {
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    heywood: bool,
    reason: Option<String>,
    non_pd_iterates: usize,
}

#[derive(Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    seed: Option<u64>,
    data: String,
    spec: String,
    n: usize,
    p: usize,
}

#[derive(Serialize)]
struct FitReport {
    method: MethodInfo,
    loss: f64,
    se_kind: Option<SeKind>,
    info_variant: Option<InfoVariant>,
    parameters: Vec<ParamRow>,
    statistics: Option<FitStatistics>,
    convergence: Convergence,
    warnings: Vec<String>,
    provenance: Provenance,
}

fn se_setting(choice: SeChoice, method: &Method) -> Result<(SeRule, Option<InfoVariant>), Failure> {
    let variant = match choice {
        SeChoice::Auto => return Ok((SeRule::Auto, None)),
        SeChoice::Standard => return Ok((SeRule::Standard, None)),
        SeChoice::Sandwich => return Ok((SeRule::Sandwich, None)),
        SeChoice::ExpectedModel => InfoVariant::ExpectedModel,
        SeChoice::ObservedModel => InfoVariant::ObservedModel,
        SeChoice::Sample => InfoVariant::Sample,
    };
    if !method.kind.is_ml() {
        return Err(Failure::input(format!("--se {} applies only to ML methods", se_name(choice))));
    }
    Ok((SeRule::Standard, Some(variant)))
}

fn se_name(choice: SeChoice) -> String {
    choice.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&args.a) {
        return Err(Failure::input(format!("--a {} is outside [0, 1]", args.a)));
    }
    let method = parse_method(&args.method, args.a)?;
    let (rule, variant) = se_setting(args.se, &method)?;
    let (x, spec, data_src, spec_src) = load_inputs(&args.input)?;
    let moments = MomentSet::from_data(&x)?;
    let result = dlsem::fit(&moments, &spec, &method, &args.optimizer.options()?)?;

    let mut warnings = Vec::new();
    let mut numeric_failure = None;
    let (se, statistics) = if result.converged {
        let se = match standard_errors(&result, &method, &moments, &spec, rule, variant) {
            Ok(s) => Some(s),
            Err(e) => {
                warnings.push(format!("standard errors unavailable: {e}"));
                numeric_failure = Some(e.to_string());
                None
            }
        };
        let stats = match fit_statistics(&result, &method, &moments, &spec) {
            Ok(s) => Some(s),
            Err(e @ Error::DegenerateStatistic(_)) => {
                warnings.push(format!("fit statistics unavailable: {e}"));
                None
            }
            Err(e) => {
                warnings.push(format!("fit statistics unavailable: {e}"));
                numeric_failure.get_or_insert(e.to_string());
                None
            }
        };
        (se, stats)
    } else {
        (None, None)
    };
    if result.heywood {
        warnings.push("Heywood case: a residual variance is at or below zero".into());
    }

    let parameters = spec
        .param_names()
        .iter()
        .enumerate()
        .map(|(i, name)| ParamRow {
            name: name.clone(),
            estimate: result.theta.0[i],
            se: se.as_ref().map(|s| s.se[i]),
            z: se.as_ref().map(|s| s.z[i]),
        })
        .collect();
    let report = FitReport {
        method: MethodInfo { name: method.kind, a: method.kind.is_tuned().then_some(method.a) },
        loss: result.loss,
        se_kind: se.as_ref().map(|s| s.kind),
        info_variant: se.as_ref().and_then(|s| s.info_variant),
        parameters,
        statistics,
        convergence: Convergence {
            converged: result.converged,
            iterations: result.iterations,
            gradient_norm: result.gradient_norm,
            heywood: result.heywood,
            reason: result.reason.map(|r| r.to_string()),
            non_pd_iterates: result.non_pd_iterates,
        },
        warnings,
        provenance: Provenance {
            tool: "dlsem",
            version: VERSION,
            seed: None,
            data: data_src,
            spec: spec_src,
            n: x.n(),
            p: x.p(),
        },
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let text = match args.out {
        OutFormat::Json => serde_json::to_string_pretty(&report)?,
        OutFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["name", "estimate", "se", "z"])?;
            for r in &report.parameters {
                let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
                w.write_record([r.name.clone(), r.estimate.to_string(), opt(r.se), opt(r.z)])?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Failure::input(e.to_string()))?).expect("utf-8 CSV")
        }
    };
    emit(args.output.as_deref(), &text)?;
    if !result.converged {
        let reason = result.reason.map_or_else(|| "unknown".to_string(), |r| r.to_string());
        return Err(Failure { code: 3, message: format!("estimation did not converge: {reason}") });
    }
    if let Some(msg) = numeric_failure {
        return Err(Failure { code: 4, message: msg });
    }
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::input(format!("--grid '{text}' is not start:stop:step or a comma-separated list"));
    let grid = if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let steps = ((stop - start) / step + 1e-9).floor() as usize;
        if (start, stop, step) == (0.0, 1.0, 1.0 / steps as f64) {
            uniform_grid(steps)
        } else {
            (0..=steps).map(|i| start + i as f64 * step).collect()
        }
    } else {
        text.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?
    };
    if grid.is_empty() {
        return Err(bad());
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Failure::input(format!("--grid value {a} is outside [0, 1]")));
    }
    Ok(grid)
}

#[derive(Serialize)]
struct TuneOutput {
    #[serde(flatten)]
    report: dlsem::TuneReport,
    data: String,
    spec: String,
}

fn curve_csv(report: &dlsem::TuneReport) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["a", "rmse", "converged"])?;
    for c in &report.curve {
        w.write_record([c.a.to_string(), c.rmse.map_or_else(String::new, |r| r.to_string()), c.converged.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Failure::input(e.to_string()))?).expect("utf-8 CSV"))
}

fn cmd_tune(args: TuneArgs) -> CmdResult {
    let kind: MethodKind = args.method.parse()?;
    let grid = parse_grid(&args.grid)?;
    if args.bootstrap == 0 {
        return Err(Failure::input("--bootstrap must be positive"));
    }
    let (x, spec, data_src, spec_src) = load_inputs(&args.input)?;
    let fits = bootstrap_fits_with(&x, &spec, kind, &grid, args.bootstrap, args.seed, &args.optimizer.options()?)?;
    let report = fits.report(args.bootstrap, &spec)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let curve = curve_csv(&report)?;
    if let Some(p) = &args.curve {
        std::fs::write(p, &curve)?;
    }
    let text = match args.out {
        OutFormat::Json => serde_json::to_string_pretty(&TuneOutput { report, data: data_src, spec: spec_src })?,
        OutFormat::Csv => curve,
    };
    emit(args.output.as_deref(), &text)
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::input(format!("{}: {e}", args.config.display())))?;
    let config = StudyConfig::from_json(&text)?;
    config.plan()?;
    let report = run_study(&config)?;
    write_study_outputs(&report, &args.out)?;
    eprintln!("wrote {} cells to {}", report.cells.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DescribeReport {
    n: usize,
    p: usize,
    variables: Vec<String>,
    covariance: Vec<Vec<f64>>,
    skewness: Option<f64>,
    kurtosis: Option<f64>,
    warnings: Vec<String>,
    provenance: Provenance,
}

fn cmd_describe(args: DescribeArgs) -> CmdResult {
    let (x, data_src) = load_data(args.data.as_deref())?;
    let s = dlsem::moments::sample_cov(&x)?;
    let mut warnings = Vec::new();
    let skewness = multivariate_skewness(&x).map_err(|e| warnings.push(e.to_string())).ok();
    let kurtosis = multivariate_kurtosis(&x).ok();
    if !s.is_positive_definite() {
        warnings.push("sample covariance is singular; shape statistics are undefined".into());
    }
    warnings.dedup();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let p = x.p();
    let report = DescribeReport {
        n: x.n(),
        p,
        variables: x.names().to_vec(),
        covariance: (0..p).map(|i| (0..p).map(|j| s.get(i, j)).collect()).collect(),
        skewness,
        kurtosis,
        warnings,
        provenance: Provenance { tool: "dlsem", version: VERSION, seed: None, data: data_src, spec: String::new(), n: x.n(), p },
    };
    let text = match args.out {
        OutFormat::Json => serde_json::to_string_pretty(&report)?,
        OutFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec![String::new()];
            header.extend(report.variables.iter().cloned());
            w.write_record(&header)?;
            for (name, row) in report.variables.iter().zip(&report.covariance) {
                let mut rec = vec![name.clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Failure::input(e.to_string()))?).expect("utf-8 CSV")
        }
    };
    emit(None, &text)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Failure::input(format!("{THREADS_ENV}='{v}' is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Failure::input("thread count must be positive"));
        }
        configure_threads(n)?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Describe(a) => cmd_describe(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
