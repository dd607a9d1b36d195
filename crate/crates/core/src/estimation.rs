//! Weight matrices, discrepancy functions and the Gauss-Newton fitter.
//!
//! All eleven estimators minimize either the quadratic form
//! `[s − σ(θ)]' Ŵ [s − σ(θ)]` or the normal-theory ML discrepancy. Weights
//! built from `Σ(θ)` (GLS_M, DLS_M, and the ML scoring weight) are rebuilt at
//! every outer iteration, so a converged estimate is a fixed point of its
//! own weight.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{guarded_inverse, kron_vech, vech, HalfVec, SymMatrix};
use crate::model::{heywood_params, implied_covariance, jacobian, start_values, ModelSpec, ParamVector};
use crate::moments::{gamma_normal, MomentSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    DlsS,
    DlsM,
    GlsS,
    GlsM,
    Wls,
    RglsD,
    RglsI,
    Ls,
    MlS,
    MlOm,
    MlEm,
}

impl MethodKind {
    pub const ALL: [MethodKind; 11] = [
        MethodKind::DlsS,
        MethodKind::DlsM,
        MethodKind::GlsS,
        MethodKind::GlsM,
        MethodKind::Wls,
        MethodKind::RglsD,
        MethodKind::RglsI,
        MethodKind::Ls,
        MethodKind::MlS,
        MethodKind::MlOm,
        MethodKind::MlEm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::DlsS => "dls-s",
            MethodKind::DlsM => "dls-m",
            MethodKind::GlsS => "gls-s",
            MethodKind::GlsM => "gls-m",
            MethodKind::Wls => "wls",
            MethodKind::RglsD => "rgls-d",
            MethodKind::RglsI => "rgls-i",
            MethodKind::Ls => "ls",
            MethodKind::MlS => "ml-s",
            MethodKind::MlOm => "ml-om",
            MethodKind::MlEm => "ml-em",
        }
    }

    /// Whether the blend parameter `a` affects this method.
    pub fn is_tuned(self) -> bool {
        matches!(self, MethodKind::DlsS | MethodKind::DlsM | MethodKind::RglsD | MethodKind::RglsI)
    }

    pub fn is_ml(self) -> bool {
        matches!(self, MethodKind::MlS | MethodKind::MlOm | MethodKind::MlEm)
    }

    pub fn is_dls(self) -> bool {
        matches!(self, MethodKind::DlsS | MethodKind::DlsM)
    }

    /// Weight depends on `Σ(θ)` and is rebuilt each iteration.
    pub fn reweighted(self) -> bool {
        matches!(self, MethodKind::DlsM | MethodKind::GlsM) || self.is_ml()
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let kind = match norm.as_str() {
            "ml" => MethodKind::MlEm,
            "adf" => MethodKind::Wls,
            other => *MethodKind::ALL
                .iter()
                .find(|k| k.name() == other || k.name().replace('-', "") == other)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))?,
        };
        Ok(kind)
    }
}

/// An estimator together with its tuning value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    pub a: f64,
}

impl Method {
    pub fn new(kind: MethodKind, a: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidConfig(format!("tuning parameter a={a} is outside [0, 1]")));
        }
        Ok(Method { kind, a: if kind.is_tuned() { a } else { 0.0 } })
    }

    /// Method without a tuning value.
    pub fn plain(kind: MethodKind) -> Self {
        Method { kind, a: 0.0 }
    }

    pub fn label(&self) -> String {
        if self.kind.is_tuned() {
            format!("{}(a={})", self.kind, self.a)
        } else {
            self.kind.to_string()
        }
    }
}

/// Optimizer controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when `max_i |Δθ_i| / (1 + |θ_i|)` falls below this.
    pub param_tol: f64,
    /// Stop when the Gauss-Newton decrement `√(g'H⁻¹g)` falls below this.
    pub grad_tol: f64,
    pub step_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iterations: 200, param_tol: 1e-6, grad_tol: 1e-8, step_halvings: 20 }
    }
}

/// Reason an optimization did not converge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailReason {
    IterationCap,
    SingularWeight,
    SingularStep,
    LineSearch,
    NonPdModel,
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailReason::IterationCap => "iteration cap reached",
            FailReason::SingularWeight => "singular weight matrix",
            FailReason::SingularStep => "singular Gauss-Newton system",
            FailReason::LineSearch => "step halving failed to decrease the loss",
            FailReason::NonPdModel => "model-implied covariance not positive definite",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ParamVector,
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub heywood: bool,
    /// Final `Ŵ`; for ML the expected-information weight at `Σ(θ̂)`.
    pub weight_used: SymMatrix,
    /// Gauss-Newton decrement at `θ̂`.
    pub gradient_norm: f64,
    /// Relative size of the last accepted step.
    pub last_step: f64,
    pub reason: Option<FailReason>,
    /// Iterations at which `Σ(θ_k)` was not positive definite and the previous weight was reused.
    pub non_pd_iterates: usize,
}

/// Builds `Ŵ` for a method. `gamma_n` is `Γ̂_N.S` or `Γ̂_N.M` as the method requires.
pub fn build_weight(method: &Method, gamma_adf: &SymMatrix, gamma_n: &SymMatrix) -> Result<SymMatrix> {
    let a = method.a;
    let target = match method.kind {
        MethodKind::Ls => return Ok(SymMatrix::identity(gamma_adf.dim())),
        MethodKind::DlsS | MethodKind::DlsM => gamma_adf.blend(1.0 - a, gamma_n, a),
        MethodKind::GlsS | MethodKind::GlsM | MethodKind::MlS | MethodKind::MlOm | MethodKind::MlEm => {
            gamma_n.clone()
        }
        MethodKind::Wls => gamma_adf.clone(),
        MethodKind::RglsD => gamma_adf.blend(1.0 - a, &gamma_adf.diag_part(), a),
        MethodKind::RglsI => gamma_adf.blend(1.0 - a, &SymMatrix::identity(gamma_adf.dim()), a),
    };
    Ok(guarded_inverse(&target)?.inverse)
}

/// `F_GLS = [s − σ]' W [s − σ]`.
pub fn gls_loss(s: &HalfVec, sigma: &HalfVec, w: &SymMatrix) -> f64 {
    let r = s.as_vector() - sigma.as_vector();
    r.dot(&(w.as_matrix() * &r))
}

fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `F_ML = tr(SΣ⁻¹) − log|SΣ⁻¹| − p`.
pub fn ml_loss(s: &SymMatrix, sigma: &SymMatrix) -> Result<f64> {
    let log_s = log_det_pd(s.as_matrix())
        .ok_or_else(|| Error::InvalidData("sample covariance is not positive definite".into()))?;
    ml_loss_with_logdet(s, log_s, sigma)
}

fn ml_loss_with_logdet(s: &SymMatrix, log_det_s: f64, sigma: &SymMatrix) -> Result<f64> {
    let chol = sigma.as_matrix().clone().cholesky().ok_or(Error::SingularModel)?;
    let log_sigma = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = chol.solve(s.as_matrix()).trace();
    Ok(trace - log_det_s + log_sigma - s.dim() as f64)
}

/// `Γ_N(Σ)⁻¹ = ½ D'(Σ⁻¹⊗Σ⁻¹)D`, avoiding a `p*×p*` inversion.
pub(crate) fn normal_weight(sigma: &SymMatrix, spec: &ModelSpec) -> Result<SymMatrix> {
    let inv = guarded_inverse(sigma).map_err(|_| Error::SingularModel)?.inverse;
    Ok(SymMatrix::from_symmetric_unchecked(kron_vech(inv.as_matrix(), inv.as_matrix(), spec.pairs()) * 0.5))
}

/// Weight at `Σ(θ)` for a reweighted method.
fn model_weight(method: &Method, sigma: &SymMatrix, moments: &MomentSet, spec: &ModelSpec) -> Result<SymMatrix> {
    if method.kind == MethodKind::DlsM {
        build_weight(method, &moments.gamma_adf, &gamma_normal(sigma))
    } else {
        normal_weight(sigma, spec)
    }
}

/// Fits `spec` to `moments` from deterministic start values.
pub fn fit(moments: &MomentSet, spec: &ModelSpec, method: &Method, options: &FitOptions) -> Result<FitResult> {
    let start = start_values(spec, &moments.s)?;
    fit_from(moments, spec, method, options, start)
}

enum Objective<'a> {
    Quadratic,
    Ml { s: &'a SymMatrix, log_det_s: f64 },
}

/// Fits from an explicit starting point.
pub fn fit_from(
    moments: &MomentSet,
    spec: &ModelSpec,
    method: &Method,
    options: &FitOptions,
    start: ParamVector,
) -> Result<FitResult> {
    if moments.p() != spec.p() {
        return Err(Error::Dimension(format!("data have p={}, model has p={}", moments.p(), spec.p())));
    }
    if start.len() != spec.q() {
        return Err(Error::Dimension("start vector does not match the model".into()));
    }
    let kind = method.kind;
    let objective = if kind.is_ml() {
        let log_det_s = log_det_pd(moments.s.as_matrix())
            .ok_or_else(|| Error::InvalidData("sample covariance is not positive definite".into()))?;
        Objective::Ml { s: &moments.s, log_det_s }
    } else {
        Objective::Quadratic
    };
    let s = &moments.s_vech;

    let eval = |theta: &ParamVector, w: &SymMatrix| -> f64 {
        let Ok(sigma) = implied_covariance(spec, theta) else { return f64::INFINITY };
        let value = match &objective {
            Objective::Quadratic => gls_loss(s, &vech(&sigma), w),
            Objective::Ml { s, log_det_s } => {
                ml_loss_with_logdet(s, *log_det_s, &sigma).unwrap_or(f64::INFINITY)
            }
        };
        if value.is_finite() {
            value
        } else {
            f64::INFINITY
        }
    };

    let fail = |theta: ParamVector, w: SymMatrix, it: usize, reason: FailReason, non_pd: usize| FitResult {
        heywood: !heywood_params(spec, &theta).is_empty(),
        theta,
        loss: f64::NAN,
        converged: false,
        iterations: it,
        weight_used: w,
        gradient_norm: f64::NAN,
        last_step: f64::NAN,
        reason: Some(reason),
        non_pd_iterates: non_pd,
    };

    let mut theta = start;
    let mut weight: Option<SymMatrix> = if kind.reweighted() {
        None
    } else {
        let gamma_n = if kind.is_tuned() || kind == MethodKind::GlsS {
            gamma_normal(&moments.s)
        } else {
            // unused by the remaining fixed-weight methods
            SymMatrix::identity(1)
        };
        match build_weight(method, &moments.gamma_adf, &gamma_n) {
            Ok(w) => Some(w),
            Err(_) => {
                let p = spec.pstar();
                return Ok(fail(theta, SymMatrix::identity(p), 0, FailReason::SingularWeight, 0));
            }
        }
    };

    let mut non_pd_run = 0usize;
    let mut non_pd_total = 0usize;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    let mut iterations = 0usize;

    while iterations < options.max_iterations {
        iterations += 1;
        let sigma = implied_covariance(spec, &theta)?;

        if kind.reweighted() {
            let fresh = if sigma.is_positive_definite() { model_weight(method, &sigma, moments, spec).ok() } else { None };
            match fresh {
                Some(w) => {
                    weight = Some(w);
                    non_pd_run = 0;
                }
                None => {
                    non_pd_run += 1;
                    non_pd_total += 1;
                    if weight.is_none() || non_pd_run >= 5 {
                        let w = weight.unwrap_or_else(|| SymMatrix::identity(spec.pstar()));
                        return Ok(fail(theta, w, iterations, FailReason::NonPdModel, non_pd_total));
                    }
                }
            }
        }
        let w = weight.as_ref().expect("weight set above");

        let jac = jacobian(spec, &theta)?;
        let resid = s.as_vector() - vech(&sigma).as_vector();
        let wj = w.as_matrix() * &jac;
        let info = jac.transpose() * &wj;
        let grad: DVector<f64> = wj.transpose() * &resid;
        let Some(chol) = info.cholesky() else {
            return Ok(fail(theta, w.clone(), iterations, FailReason::SingularStep, non_pd_total));
        };
        let delta = chol.solve(&grad);
        let decrement = grad.dot(&delta).max(0.0).sqrt();
        if decrement < options.grad_tol {
            converged = true;
            last_step = 0.0;
            break;
        }

        let current = eval(&theta, w);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=options.step_halvings {
            let trial = ParamVector(&theta.0 + &delta * step);
            let value = eval(&trial, w);
            if value <= current + 1e-12 * (1.0 + current.abs()) {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            return Ok(fail(theta, w.clone(), iterations, FailReason::LineSearch, non_pd_total));
        };
        last_step = (&next.0 - &theta.0)
            .iter()
            .zip(next.0.iter())
            .map(|(d, t)| d.abs() / (1.0 + t.abs()))
            .fold(0.0, f64::max);
        theta = next;
        if last_step < options.param_tol {
            converged = true;
            break;
        }
    }

    // Final weight, loss and decrement at θ̂.
    let sigma = implied_covariance(spec, &theta)?;
    let final_weight = if kind.reweighted() {
        match model_weight(method, &sigma, moments, spec) {
            Ok(w) => w,
            Err(_) => {
                let w = weight.unwrap_or_else(|| SymMatrix::identity(spec.pstar()));
                return Ok(fail(theta, w, iterations, FailReason::NonPdModel, non_pd_total));
            }
        }
    } else {
        weight.expect("fixed weight")
    };
    let loss = eval(&theta, &final_weight);
    let jac = jacobian(spec, &theta)?;
    let resid = s.as_vector() - vech(&sigma).as_vector();
    let wj = final_weight.as_matrix() * &jac;
    let grad: DVector<f64> = wj.transpose() * &resid;
    let gradient_norm = match (jac.transpose() * &wj).cholesky() {
        Some(chol) => grad.dot(&chol.solve(&grad)).max(0.0).sqrt(),
        None => f64::NAN,
    };
    if !loss.is_finite() {
        return Ok(fail(theta, final_weight, iterations, FailReason::NonPdModel, non_pd_total));
    }

    Ok(FitResult {
        heywood: !heywood_params(spec, &theta).is_empty(),
        theta,
        loss: loss.max(0.0),
        converged,
        iterations,
        weight_used: final_weight,
        gradient_norm,
        last_step,
        reason: (!converged).then_some(FailReason::IterationCap),
        non_pd_iterates: non_pd_total,
    })
}
