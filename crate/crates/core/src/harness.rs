//! Monte Carlo studies, evaluation metrics, and bootstrap selection of `a`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    bollen_stine_transform, bootstrap_with, build_population, generate_with, stream_rng, Condition, RadialMode,
};
use crate::error::{Error, Result};
use crate::estimation::{fit, fit_from, FitOptions, Method, MethodKind};
use crate::fitstats::fit_statistics;
use crate::inference::{standard_errors, SeRule};
use crate::model::{implied_covariance, start_values, ModelSpec, ParamKind, ParamVector};
use crate::moments::{DataMatrix, MomentSet};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sizes the global worker pool. Call once, before any study or tuning run.
pub fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// `(1/q) Σ_i √(mean_j (θ̂_ij − θ_i)²)`.
pub fn rmse(estimates: &[ParamVector], truth: &ParamVector) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::UndefinedMetric("RMSE needs at least one converged replication".into()));
    }
    let q = truth.len();
    let r = estimates.len() as f64;
    let mut total = 0.0;
    for i in 0..q {
        let mse: f64 = estimates.iter().map(|e| (e.0[i] - truth.0[i]).powi(2)).sum::<f64>() / r;
        total += mse.sqrt();
    }
    Ok(total / q as f64)
}

/// Per-parameter standard deviation (divisor `count − 1`) across replications.
pub fn empirical_se(estimates: &[ParamVector]) -> Result<Vec<f64>> {
    if estimates.len() < 2 {
        return Err(Error::UndefinedMetric("empirical SE needs at least two converged replications".into()));
    }
    let q = estimates[0].len();
    let r = estimates.len() as f64;
    Ok((0..q)
        .map(|i| {
            let mean = estimates.iter().map(|e| e.0[i]).sum::<f64>() / r;
            (estimates.iter().map(|e| (e.0[i] - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
        })
        .collect())
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let q = rows.first().map_or(0, Vec::len);
    (0..q).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
}

/// Mean over `subset` of `|mean ŜE_i − SE_i| / SE_i`.
pub fn relative_se_bias(se_estimates: &[Vec<f64>], empirical: &[f64], subset: &[usize]) -> Result<f64> {
    if se_estimates.is_empty() || subset.is_empty() {
        return Err(Error::UndefinedMetric("no standard errors to compare".into()));
    }
    let mean_se = column_means(se_estimates);
    let mut total = 0.0;
    for &i in subset {
        if !(empirical[i] > 0.0) {
            return Err(Error::UndefinedMetric(format!("empirical SE of parameter {i} is zero")));
        }
        total += ((mean_se[i] - empirical[i]) / empirical[i]).abs();
    }
    Ok(total / subset.len() as f64)
}

/// Fraction of p-values below `alpha`.
pub fn type_i_error(p_values: &[f64], alpha: f64) -> Result<f64> {
    if p_values.is_empty() {
        return Err(Error::UndefinedMetric("no p-values".into()));
    }
    Ok(p_values.iter().filter(|p| **p < alpha).count() as f64 / p_values.len() as f64)
}

/// Picks the grid point with the smallest RMSE; exact ties go to the larger `a`.
pub fn select_a(curve: &[CurvePoint]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for pt in curve {
        let Some(r) = pt.rmse else { continue };
        best = match best {
            Some((a, b)) if b < r || (b == r && a > pt.a) => Some((a, b)),
            _ => Some((pt.a, r)),
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Misspecification {
    #[default]
    None,
    ZeroFactorCorrelations,
    EqualLoadings,
}

impl Misspecification {
    pub fn apply(self, spec: &ModelSpec) -> Result<ModelSpec> {
        match self {
            Misspecification::None => Ok(spec.clone()),
            Misspecification::ZeroFactorCorrelations => spec.with_zero_factor_correlations(),
            Misspecification::EqualLoadings => spec.with_equal_loadings(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: String,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

/// Study configuration as read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub p: usize,
    pub m: usize,
    pub n_list: Vec<usize>,
    pub conditions: Vec<String>,
    pub methods: Vec<MethodEntry>,
    /// Defaults to 200, or 1000 with `full`.
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Seed for the population loadings; defaults to `seed`.
    #[serde(default)]
    pub population_seed: Option<u64>,
    #[serde(default)]
    pub misspecification: Misspecification,
    #[serde(default)]
    pub radial: RadialMode,
    /// Full-scale defaults: 1000 replications and a 0.01 grid.
    #[serde(default)]
    pub full: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_se_rule")]
    pub se_rule: SeRule,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_se_rule() -> SeRule {
    SeRule::Auto
}

/// `0, 1/steps, …, 1`.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Validated study plan.
#[derive(Debug, Clone)]
pub struct StudyPlan {
    pub p: usize,
    pub m: usize,
    pub n_list: Vec<usize>,
    pub conditions: Vec<Condition>,
    pub methods: Vec<(MethodKind, Vec<f64>)>,
    pub replications: usize,
    pub seed: u64,
    pub population_seed: u64,
    pub misspecification: Misspecification,
    pub radial: RadialMode,
    pub alpha: f64,
    pub se_rule: SeRule,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn plan(&self) -> Result<StudyPlan> {
        let bad = |field: String, msg: String| Error::InvalidConfig(format!("{field}: {msg}"));
        if self.m == 0 || self.p % self.m != 0 {
            return Err(bad("p".into(), format!("p={} is not divisible by m={}", self.p, self.m)));
        }
        if self.n_list.is_empty() {
            return Err(bad("n_list".into(), "empty".into()));
        }
        if let Some((i, n)) = self.n_list.iter().enumerate().find(|(_, n)| **n < 2) {
            return Err(bad(format!("n_list[{i}]"), format!("sample size {n} is below 2")));
        }
        let conditions = self
            .conditions
            .iter()
            .enumerate()
            .map(|(i, c)| c.parse::<Condition>().map_err(|_| bad(format!("conditions[{i}]"), format!("unknown condition '{c}'"))))
            .collect::<Result<Vec<_>>>()?;
        if conditions.is_empty() {
            return Err(bad("conditions".into(), "empty".into()));
        }
        let default_grid = if self.full { uniform_grid(100) } else { uniform_grid(10) };
        let mut methods = Vec::new();
        for (i, entry) in self.methods.iter().enumerate() {
            let kind: MethodKind = entry
                .method
                .parse()
                .map_err(|_| bad(format!("methods[{i}].method"), format!("unknown method '{}'", entry.method)))?;
            let grid = if kind.is_tuned() { entry.grid.clone().unwrap_or_else(|| default_grid.clone()) } else { vec![0.0] };
            if grid.is_empty() {
                return Err(bad(format!("methods[{i}].grid"), "empty".into()));
            }
            if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(bad(format!("methods[{i}].grid"), format!("a={a} is outside [0, 1]")));
            }
            methods.push((kind, grid));
        }
        if methods.is_empty() {
            return Err(bad("methods".into(), "empty".into()));
        }
        let replications = self.replications.unwrap_or(if self.full { 1000 } else { 200 });
        if replications == 0 {
            return Err(bad("replications".into(), "must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha".into(), format!("{} is outside (0, 1)", self.alpha)));
        }
        Ok(StudyPlan {
            p: self.p,
            m: self.m,
            n_list: self.n_list.clone(),
            conditions,
            methods,
            replications,
            seed: self.seed,
            population_seed: self.population_seed.unwrap_or(self.seed),
            misspecification: self.misspecification,
            radial: self.radial,
            alpha: self.alpha,
            se_rule: self.se_rule,
        })
    }
}

/// Rejection rates over converged replications with a computable statistic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionRates {
    pub t: Option<f64>,
    pub t_sb: Option<f64>,
    pub t_mva: Option<f64>,
    pub t_jy_rank: Option<f64>,
    pub t_jy_df: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub condition: Condition,
    pub n: usize,
    pub method: MethodKind,
    pub a: f64,
    pub replications: usize,
    pub converged: usize,
    pub nonconverged: usize,
    pub convergence_rate: f64,
    pub heywood_rate: f64,
    pub rmse: Option<f64>,
    /// Relative SE bias over loadings and factor covariances.
    pub se_bias_focus: Option<f64>,
    pub se_bias_all: Option<f64>,
    pub empirical_se: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub rejection: RejectionRates,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub condition: Condition,
    pub n: usize,
    pub method: MethodKind,
    pub a_s: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub version: String,
    pub seed: u64,
    pub population_seed: u64,
    pub replications: usize,
    pub p: usize,
    pub m: usize,
    pub misspecification: Misspecification,
    pub radial: RadialMode,
    pub alpha: f64,
    pub param_names: Vec<String>,
    pub theta_true: Vec<f64>,
    pub cells: Vec<CellReport>,
    pub selections: Vec<Selection>,
}

impl StudyReport {
    pub fn cell(&self, condition: Condition, n: usize, method: MethodKind, a: f64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.condition == condition && c.n == n && c.method == method && (c.a - a).abs() < 1e-12)
    }

    pub fn selection(&self, condition: Condition, n: usize, method: MethodKind) -> Option<&Selection> {
        self.selections.iter().find(|s| s.condition == condition && s.n == n && s.method == method)
    }
}

#[derive(Debug, Clone)]
struct FitRecord {
    theta: Option<ParamVector>,
    heywood: bool,
    se: Option<Vec<f64>>,
    p_values: Option<[f64; 5]>,
}

const FAILED: FitRecord = FitRecord { theta: None, heywood: false, se: None, p_values: None };

fn run_replication(
    plan: &StudyPlan,
    pop: &crate::datagen::PopulationModel,
    spec: &ModelSpec,
    condition: Condition,
    n: usize,
    stream: u64,
) -> Vec<FitRecord> {
    let slots: usize = plan.methods.iter().map(|(_, g)| g.len()).sum();
    let mut rng = stream_rng(plan.seed, stream);
    let Ok(x) = generate_with(pop, n, condition, plan.radial, &mut rng) else { return vec![FAILED; slots] };
    let Ok(moments) = MomentSet::from_data(&x) else { return vec![FAILED; slots] };
    let options = FitOptions::default();
    let Ok(cold) = start_values(spec, &moments.s) else { return vec![FAILED; slots] };
    let mut out = Vec::with_capacity(slots);
    for (kind, grid) in &plan.methods {
        // Largest a first, each fit starting from its neighbour's estimate.
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&i, &j| grid[j].total_cmp(&grid[i]));
        let mut records = vec![FAILED; grid.len()];
        let mut warm = cold.clone();
        for g in order {
            let Ok(method) = Method::new(*kind, grid[g]) else { continue };
            let mut res = fit_from(&moments, spec, &method, &options, warm.clone()).ok().filter(|f| f.converged);
            if res.is_none() && warm != cold {
                res = fit_from(&moments, spec, &method, &options, cold.clone()).ok().filter(|f| f.converged);
            }
            let Some(f) = res else { continue };
            warm = f.theta.clone();
            let se = standard_errors(&f, &method, &moments, spec, plan.se_rule, None).ok().map(|s| s.se);
            let p_values =
                fit_statistics(&f, &method, &moments, spec).ok().map(|s| [s.p_t, s.p_sb, s.p_mva, s.p_jy, s.p_jy_df]);
            records[g] = FitRecord { heywood: f.heywood, theta: Some(f.theta), se, p_values };
        }
        out.extend(records);
    }
    out
}

fn summarize(
    records: &[&FitRecord],
    truth: &ParamVector,
    focus: &[usize],
    alpha: f64,
) -> (usize, f64, Option<f64>, Option<f64>, Option<f64>, Vec<f64>, Vec<f64>, RejectionRates) {
    let thetas: Vec<ParamVector> = records.iter().filter_map(|r| r.theta.clone()).collect();
    let converged = thetas.len();
    let heywood = records.iter().filter(|r| r.theta.is_some() && r.heywood).count();
    let heywood_rate = if converged > 0 { heywood as f64 / converged as f64 } else { 0.0 };
    let rmse_v = rmse(&thetas, truth).ok();
    let emp = empirical_se(&thetas).unwrap_or_default();
    let ses: Vec<Vec<f64>> = records.iter().filter(|r| r.theta.is_some()).filter_map(|r| r.se.clone()).collect();
    let mean_se = column_means(&ses);
    let all: Vec<usize> = (0..truth.len()).collect();
    let bias = |subset: &[usize]| if emp.is_empty() { None } else { relative_se_bias(&ses, &emp, subset).ok() };
    let pv: Vec<[f64; 5]> = records.iter().filter(|r| r.theta.is_some()).filter_map(|r| r.p_values).collect();
    let rate = |k: usize| {
        let v: Vec<f64> = pv.iter().map(|p| p[k]).filter(|p| p.is_finite()).collect();
        type_i_error(&v, alpha).ok()
    };
    let rejection =
        RejectionRates { t: rate(0), t_sb: rate(1), t_mva: rate(2), t_jy_rank: rate(3), t_jy_df: rate(4) };
    (converged, heywood_rate, rmse_v, bias(focus), bias(&all), emp, mean_se, rejection)
}

/// Runs every (condition, N) cell; replications run in parallel on the current rayon pool.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    let plan = config.plan()?;
    let pop = build_population(plan.p, plan.m, plan.population_seed)?;
    let spec = plan.misspecification.apply(&pop.spec)?;
    let truth = spec.theta_from_matrices(&pop.lambda, &pop.phi, &pop.psi);
    let focus: Vec<usize> = spec
        .param_kinds()
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, ParamKind::Loading | ParamKind::FactorCov))
        .map(|(i, _)| i)
        .collect();

    let mut cells = Vec::new();
    let mut selections = Vec::new();
    for (ci, &condition) in plan.conditions.iter().enumerate() {
        for (ni, &n) in plan.n_list.iter().enumerate() {
            let cell_id = ((ci as u64) << 48) | ((ni as u64) << 32);
            let reps: Vec<Vec<FitRecord>> = (0..plan.replications)
                .into_par_iter()
                .map(|r| run_replication(&plan, &pop, &spec, condition, n, cell_id | r as u64))
                .collect();
            let mut slot = 0;
            for (kind, grid) in &plan.methods {
                let mut curve = Vec::new();
                for &a in grid {
                    let records: Vec<&FitRecord> = reps.iter().map(|r| &r[slot]).collect();
                    slot += 1;
                    let (converged, heywood_rate, rmse_v, focus_bias, all_bias, emp, mean_se, rejection) =
                        summarize(&records, &truth, &focus, plan.alpha);
                    curve.push(CurvePoint { a, rmse: rmse_v, converged });
                    cells.push(CellReport {
                        condition,
                        n,
                        method: *kind,
                        a,
                        replications: plan.replications,
                        converged,
                        nonconverged: plan.replications - converged,
                        convergence_rate: converged as f64 / plan.replications as f64,
                        heywood_rate,
                        rmse: rmse_v,
                        se_bias_focus: focus_bias,
                        se_bias_all: all_bias,
                        empirical_se: emp,
                        mean_se,
                        rejection,
                    });
                }
                if let Some((a_s, r)) = select_a(&curve) {
                    selections.push(Selection { condition, n, method: *kind, a_s, rmse: r });
                }
            }
        }
    }

    Ok(StudyReport {
        version: VERSION.to_string(),
        seed: plan.seed,
        population_seed: plan.population_seed,
        replications: plan.replications,
        p: plan.p,
        m: plan.m,
        misspecification: plan.misspecification,
        radial: plan.radial,
        alpha: plan.alpha,
        param_names: spec.param_names().to_vec(),
        theta_true: truth.as_slice().to_vec(),
        cells,
        selections,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `report.json`, flat CSV tables and plot-data CSVs into `dir`.
pub fn write_study_outputs(report: &StudyReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;

    let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
    w.write_record(["condition", "n", "method", "a", "metric", "value"])?;
    for c in &report.cells {
        let metrics: [(&str, Option<f64>); 12] = [
            ("convergence_rate", Some(c.convergence_rate)),
            ("heywood_rate", Some(c.heywood_rate)),
            ("rmse", c.rmse),
            ("se_bias_focus", c.se_bias_focus),
            ("se_bias_all", c.se_bias_all),
            ("reject_t", c.rejection.t),
            ("reject_t_sb", c.rejection.t_sb),
            ("reject_t_mva", c.rejection.t_mva),
            ("reject_t_jy_rank", c.rejection.t_jy_rank),
            ("reject_t_jy_df", c.rejection.t_jy_df),
            ("converged", Some(c.converged as f64)),
            ("nonconverged", Some(c.nonconverged as f64)),
        ];
        for (name, v) in metrics {
            w.write_record([c.condition.name(), &c.n.to_string(), c.method.name(), &c.a.to_string(), name, &opt(v)])?;
        }
        for (i, (e, s)) in c.empirical_se.iter().zip(&c.mean_se).enumerate() {
            let pname = &report.param_names[i];
            w.write_record([c.condition.name(), &c.n.to_string(), c.method.name(), &c.a.to_string(), &format!("empirical_se[{pname}]"), &e.to_string()])?;
            w.write_record([c.condition.name(), &c.n.to_string(), c.method.name(), &c.a.to_string(), &format!("mean_se[{pname}]"), &s.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("selections.csv"))?;
    w.write_record(["condition", "n", "method", "a_s", "rmse"])?;
    for s in &report.selections {
        w.write_record([s.condition.name(), &s.n.to_string(), s.method.name(), &s.a_s.to_string(), &s.rmse.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("plot_rmse_by_a.csv"))?;
    w.write_record(["condition", "n", "series", "a", "rmse"])?;
    for c in &report.cells {
        w.write_record([c.condition.name(), &c.n.to_string(), c.method.name(), &c.a.to_string(), &opt(c.rmse)])?;
    }
    w.flush()?;

    // Curves against N use each method at its selected a.
    let at_selected: Vec<&CellReport> = report
        .cells
        .iter()
        .filter(|c| report.selection(c.condition, c.n, c.method).is_none_or(|s| s.a_s == c.a))
        .collect();
    let mut w = csv::Writer::from_path(dir.join("plot_rmse_by_n.csv"))?;
    w.write_record(["condition", "series", "a", "n", "rmse"])?;
    for c in &at_selected {
        w.write_record([c.condition.name(), c.method.name(), &c.a.to_string(), &c.n.to_string(), &opt(c.rmse)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("plot_rejection_by_n.csv"))?;
    w.write_record(["condition", "series", "statistic", "a", "n", "rate"])?;
    for c in &at_selected {
        let stats = [
            ("t", c.rejection.t),
            ("t_sb", c.rejection.t_sb),
            ("t_mva", c.rejection.t_mva),
            ("t_jy_rank", c.rejection.t_jy_rank),
            ("t_jy_df", c.rejection.t_jy_df),
        ];
        for (name, v) in stats {
            w.write_record([c.condition.name(), c.method.name(), name, &c.a.to_string(), &c.n.to_string(), &opt(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub a: f64,
    pub rmse: Option<f64>,
    pub converged: usize,
}

/// Fits of every bootstrap sample at every grid value.
#[derive(Debug, Clone)]
pub struct BootstrapFits {
    pub method: MethodKind,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub theta_ml: ParamVector,
    /// `fits[b][k]` is the converged estimate for sample `b` at `grid[k]`.
    pub fits: Vec<Vec<Option<ParamVector>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    pub version: String,
    pub method: MethodKind,
    pub seed: u64,
    pub bootstrap: usize,
    pub a_s: f64,
    pub min_rmse: f64,
    pub curve: Vec<CurvePoint>,
    pub param_names: Vec<String>,
    pub theta_ml: Vec<f64>,
    pub warnings: Vec<String>,
}

/// ML fit, Bollen-Stine transform, then `b` resamples fitted at every grid value.
///
/// Sample `k` draws from stream `k` of `seed`, so a run with `b` samples is a
/// prefix of any larger run with the same seed. Within a sample the grid is
/// swept from the largest `a` down, each fit starting from its neighbour.
pub fn bootstrap_fits(
    x: &DataMatrix,
    spec: &ModelSpec,
    kind: MethodKind,
    grid: &[f64],
    b: usize,
    seed: u64,
) -> Result<BootstrapFits> {
    bootstrap_fits_with(x, spec, kind, grid, b, seed, &FitOptions::default())
}

/// [`bootstrap_fits`] with explicit optimizer settings for the bootstrap fits.
pub fn bootstrap_fits_with(
    x: &DataMatrix,
    spec: &ModelSpec,
    kind: MethodKind,
    grid: &[f64],
    b: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<BootstrapFits> {
    if b == 0 {
        return Err(Error::InvalidConfig("bootstrap count must be positive".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig("a-grid is empty".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidConfig(format!("a={a} is outside [0, 1]")));
    }
    let moments = MomentSet::from_data(x)?;
    let ml = fit(&moments, spec, &Method::plain(MethodKind::MlEm), &FitOptions::default())?;
    if !ml.converged {
        return Err(Error::CannotTune(format!(
            "ML fit did not converge ({})",
            ml.reason.map_or_else(|| "unknown".to_string(), |r| r.to_string())
        )));
    }
    let sigma_hat = implied_covariance(spec, &ml.theta)?;
    let x0 = bollen_stine_transform(x, &sigma_hat)?;

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| grid[j].total_cmp(&grid[i]));

    let fits: Vec<Vec<Option<ParamVector>>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut out = vec![None; grid.len()];
            let mut rng = stream_rng(seed, k as u64);
            let Ok(sample) = bootstrap_with(&x0, &mut rng) else { return out };
            let Ok(m) = MomentSet::from_data(&sample) else { return out };
            let Ok(cold) = start_values(spec, &m.s) else { return out };
            let mut warm = cold.clone();
            for &g in &order {
                let method = Method::new(kind, grid[g]).expect("grid validated");
                let mut res = fit_from(&m, spec, &method, options, warm.clone()).ok().filter(|f| f.converged);
                if res.is_none() && warm != cold {
                    res = fit_from(&m, spec, &method, options, cold.clone()).ok().filter(|f| f.converged);
                }
                if let Some(f) = res {
                    warm = f.theta.clone();
                    out[g] = Some(f.theta);
                }
            }
            out
        })
        .collect();

    Ok(BootstrapFits { method: kind, grid: grid.to_vec(), seed, theta_ml: ml.theta, fits })
}

impl BootstrapFits {
    /// Empirical RMSE per grid value over the first `b` samples, with `θ̂_ML` as truth.
    pub fn curve(&self, b: usize) -> Vec<CurvePoint> {
        let b = b.min(self.fits.len());
        (0..self.grid.len())
            .map(|k| {
                let est: Vec<ParamVector> = self.fits[..b].iter().filter_map(|f| f[k].clone()).collect();
                CurvePoint { a: self.grid[k], rmse: rmse(&est, &self.theta_ml).ok(), converged: est.len() }
            })
            .collect()
    }

    pub fn report(&self, b: usize, spec: &ModelSpec) -> Result<TuneReport> {
        let b = b.min(self.fits.len());
        let curve = self.curve(b);
        let (a_s, min_rmse) = select_a(&curve)
            .ok_or_else(|| Error::CannotTune("no bootstrap fit converged at any grid value".into()))?;
        let mut warnings = Vec::new();
        if b < 2 {
            warnings.push(format!("only {b} bootstrap sample; the RMSE curve is degenerate"));
        }
        if let Some(pt) = curve.iter().find(|c| c.converged < b) {
            warnings.push(format!("some bootstrap fits did not converge (e.g. {} of {b} at a={})", pt.converged, pt.a));
        }
        Ok(TuneReport {
            version: VERSION.to_string(),
            method: self.method,
            seed: self.seed,
            bootstrap: b,
            a_s,
            min_rmse,
            curve,
            param_names: spec.param_names().to_vec(),
            theta_ml: self.theta_ml.as_slice().to_vec(),
            warnings,
        })
    }
}

/// Bootstrap selection of `a` for one method.
pub fn tune_a(x: &DataMatrix, spec: &ModelSpec, kind: MethodKind, grid: &[f64], b: usize, seed: u64) -> Result<TuneReport> {
    bootstrap_fits(x, spec, kind, grid, b, seed)?.report(b, spec)
}
