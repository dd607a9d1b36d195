//! Information weights and standard errors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{FitResult, Method, MethodKind};
use crate::matrix::{guarded_inverse, kron_vech, PairIndex, SymMatrix};
use crate::model::{implied_covariance, jacobian, ModelSpec};
use crate::moments::{gamma_normal, MomentSet};

/// Which normal-theory information plays the role of `Ŵ` for ML standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfoVariant {
    /// `Γ_N(S)⁻¹`.
    Sample,
    /// Observed information at `Σ̂`.
    ObservedModel,
    /// `Γ_N(Σ̂)⁻¹`.
    ExpectedModel,
}

impl InfoVariant {
    pub fn for_method(kind: MethodKind) -> Option<Self> {
        match kind {
            MethodKind::MlS => Some(InfoVariant::Sample),
            MethodKind::MlOm => Some(InfoVariant::ObservedModel),
            MethodKind::MlEm => Some(InfoVariant::ExpectedModel),
            _ => None,
        }
    }
}

/// Normal-theory information in `σ`-coordinates.
///
/// The observed form is the Hessian of `½F_ML` with respect to `vech(Σ)`:
/// `½ D'[−(Σ⁻¹⊗Σ⁻¹) + (Σ⁻¹⊗A) + (A⊗Σ⁻¹)]D` with `A = Σ⁻¹SΣ⁻¹`. It equals
/// the expected form when `S = Σ̂`.
pub fn information_weight(variant: InfoVariant, s: &SymMatrix, sigma_hat: &SymMatrix) -> Result<SymMatrix> {
    match variant {
        InfoVariant::Sample => Ok(guarded_inverse(&gamma_normal(s))?.inverse),
        InfoVariant::ExpectedModel => Ok(guarded_inverse(&gamma_normal(sigma_hat))?.inverse),
        InfoVariant::ObservedModel => {
            let inv = guarded_inverse(sigma_hat).map_err(|_| Error::SingularModel)?.inverse.into_matrix();
            let a = &inv * s.as_matrix() * &inv;
            let idx = PairIndex::new(s.dim());
            let m = (kron_vech(&inv, &a, &idx) * 2.0 - kron_vech(&inv, &inv, &idx)) * 0.5;
            SymMatrix::new(m)
        }
    }
}

fn bread(jac: &DMatrix<f64>, w: &SymMatrix) -> Result<DMatrix<f64>> {
    let info = jac.transpose() * w.as_matrix() * jac;
    let info = (&info + info.transpose()) * 0.5;
    let inv = match info.clone().cholesky() {
        Some(c) => c.inverse(),
        None => info.try_inverse().ok_or(Error::SingularInformation)?,
    };
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::SingularInformation)
    }
}

/// `(J'WJ)⁻¹ / N`.
pub fn standard_cov(jac: &DMatrix<f64>, w: &SymMatrix, n: usize) -> Result<SymMatrix> {
    SymMatrix::new(bread(jac, w)? / n as f64)
}

/// `(J'WJ)⁻¹ J'W Γ W J (J'WJ)⁻¹ / N`.
pub fn sandwich_cov(jac: &DMatrix<f64>, w: &SymMatrix, gamma: &SymMatrix, n: usize) -> Result<SymMatrix> {
    let b = bread(jac, w)?;
    let wj = w.as_matrix() * jac;
    let meat = wj.transpose() * gamma.as_matrix() * &wj;
    SymMatrix::new(&b * meat * &b / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeRule {
    /// Standard for DLS at `a = 1`, sandwich otherwise.
    Auto,
    Standard,
    Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeKind {
    Standard,
    Sandwich,
}

impl SeRule {
    pub fn resolve(self, method: &Method) -> SeKind {
        match self {
            SeRule::Standard => SeKind::Standard,
            SeRule::Sandwich => SeKind::Sandwich,
            SeRule::Auto if method.kind.is_dls() && method.a == 1.0 => SeKind::Standard,
            SeRule::Auto => SeKind::Sandwich,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeResult {
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub kind: SeKind,
    pub info_variant: Option<InfoVariant>,
    pub cov_theta: SymMatrix,
}

/// The `Ŵ` that enters the standard-error formulas for a finished fit.
pub fn inference_weight(
    fit: &FitResult,
    method: &Method,
    moments: &MomentSet,
    spec: &ModelSpec,
    variant: Option<InfoVariant>,
) -> Result<SymMatrix> {
    match variant.or_else(|| InfoVariant::for_method(method.kind)) {
        Some(v) => information_weight(v, &moments.s, &implied_covariance(spec, &fit.theta)?),
        None => Ok(fit.weight_used.clone()),
    }
}

/// Standard errors at `θ̂`. `variant` overrides the ML information choice.
pub fn standard_errors(
    fit: &FitResult,
    method: &Method,
    moments: &MomentSet,
    spec: &ModelSpec,
    rule: SeRule,
    variant: Option<InfoVariant>,
) -> Result<SeResult> {
    let info_variant = variant.or_else(|| InfoVariant::for_method(method.kind));
    let w = inference_weight(fit, method, moments, spec, info_variant)?;
    let jac = jacobian(spec, &fit.theta)?;
    let kind = rule.resolve(method);
    let cov = match kind {
        SeKind::Standard => standard_cov(&jac, &w, moments.n)?,
        SeKind::Sandwich => sandwich_cov(&jac, &w, &moments.gamma_adf, moments.n)?,
    };
    let diag = cov.diagonal();
    if diag.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::SingularInformation);
    }
    let se: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
    let z = fit.theta.as_slice().iter().zip(&se).map(|(t, s)| t / s).collect();
    Ok(SeResult { se, z, kind, info_variant, cov_theta: cov })
}
