//! Confirmatory factor analysis structure: `Σ(θ) = ΛΦΛ' + Ψ`.
//!
//! Factors are variance-standardized (diag Φ = 1), Ψ is diagonal, and the
//! mean structure is not modelled. Free parameters are ordered as free
//! loadings (column-major over Λ), free factor covariances (column-major
//! over the strict lower triangle of Φ), then free residual variances.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{pstar, vech, HalfVec, PairIndex, SymMatrix};

/// Status of a single entry of Λ, Φ or Ψ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Entry {
    Free,
    Fixed(f64),
    /// Every entry carrying the same group id is one parameter.
    Shared(usize),
}

impl Entry {
    fn is_free(self) -> bool {
        !matches!(self, Entry::Fixed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Loading,
    FactorCov,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Loading { var: usize, factor: usize },
    FactorCov { row: usize, col: usize },
    Residual { var: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    target: Target,
    param: usize,
}

/// Free/fixed pattern of a CFA model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    variables: Vec<String>,
    factors: Vec<String>,
    /// `p×m`, column-major.
    loadings: Vec<Entry>,
    /// Strict lower triangle of Φ, column-major.
    factor_cov: Vec<Entry>,
    residuals: Vec<Entry>,
    slots: Vec<Slot>,
    kinds: Vec<ParamKind>,
    names: Vec<String>,
    pairs: PairIndex,
}

/// Free-parameter vector θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub DVector<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(DVector::from_vec(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

fn factor_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for l in 0..m {
        for k in (l + 1)..m {
            out.push((k, l));
        }
    }
    out
}

impl ModelSpec {
    pub fn new(
        variables: Vec<String>,
        factors: Vec<String>,
        loadings: Vec<Entry>,
        factor_cov: Vec<Entry>,
        residuals: Vec<Entry>,
    ) -> Result<Self> {
        let p = variables.len();
        let m = factors.len();
        if p == 0 || m == 0 {
            return Err(Error::InvalidSpec("need at least one variable and one factor".into()));
        }
        if loadings.len() != p * m {
            return Err(Error::InvalidSpec(format!("loading pattern must have {} entries", p * m)));
        }
        if factor_cov.len() != m * (m - 1) / 2 {
            return Err(Error::InvalidSpec("factor covariance pattern has wrong length".into()));
        }
        if residuals.len() != p {
            return Err(Error::InvalidSpec("residual pattern must have one entry per variable".into()));
        }
        for (i, name) in variables.iter().enumerate() {
            let any = (0..m).any(|k| match loadings[i + k * p] {
                Entry::Fixed(v) => v != 0.0,
                _ => true,
            });
            if !any {
                return Err(Error::InvalidSpec(format!("variable {name} has no nonzero loading")));
            }
        }

        let mut slots = Vec::new();
        let mut kinds = Vec::new();
        let mut names = Vec::new();
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut assign = |entry: Entry, target: Target, kind: ParamKind, name: String| {
            let param = match entry {
                Entry::Fixed(_) => return,
                Entry::Free => {
                    kinds.push(kind);
                    names.push(name);
                    kinds.len() - 1
                }
                Entry::Shared(g) => match groups.iter().find(|(gg, _)| *gg == g) {
                    Some(&(_, idx)) => idx,
                    None => {
                        kinds.push(kind);
                        names.push(name);
                        groups.push((g, kinds.len() - 1));
                        kinds.len() - 1
                    }
                },
            };
            slots.push(Slot { target, param });
        };
        for k in 0..m {
            for i in 0..p {
                assign(
                    loadings[i + k * p],
                    Target::Loading { var: i, factor: k },
                    ParamKind::Loading,
                    format!("{}=~{}", factors[k], variables[i]),
                );
            }
        }
        for (e, &(r, c)) in factor_cov.iter().zip(factor_pairs(m).iter()) {
            assign(
                *e,
                Target::FactorCov { row: r, col: c },
                ParamKind::FactorCov,
                format!("{}~~{}", factors[c], factors[r]),
            );
        }
        for (i, e) in residuals.iter().enumerate() {
            assign(*e, Target::Residual { var: i }, ParamKind::Residual, format!("{0}~~{0}", variables[i]));
        }

        Ok(ModelSpec {
            pairs: PairIndex::new(p),
            variables,
            factors,
            loadings,
            factor_cov,
            residuals,
            slots,
            kinds,
            names,
        })
    }

    /// Simple-cluster CFA: `p/m` consecutive indicators per factor, free
    /// loadings, free factor covariances and free residual variances.
    pub fn simple_cluster(p: usize, m: usize) -> Result<Self> {
        if m == 0 || p % m != 0 {
            return Err(Error::InvalidSpec(format!("p={p} is not divisible by m={m}")));
        }
        let per = p / m;
        let variables = (1..=p).map(|i| format!("x{i}")).collect();
        let factors = (1..=m).map(|k| format!("f{k}")).collect();
        let mut loadings = vec![Entry::Fixed(0.0); p * m];
        for k in 0..m {
            for i in k * per..(k + 1) * per {
                loadings[i + k * p] = Entry::Free;
            }
        }
        ModelSpec::new(variables, factors, loadings, vec![Entry::Free; m * (m - 1) / 2], vec![Entry::Free; p])
    }

    /// Same structure with every factor covariance fixed at zero.
    pub fn with_zero_factor_correlations(&self) -> Result<Self> {
        ModelSpec::new(
            self.variables.clone(),
            self.factors.clone(),
            self.loadings.clone(),
            vec![Entry::Fixed(0.0); self.factor_cov.len()],
            self.residuals.clone(),
        )
    }

    /// Same structure with all free loadings tied to one shared value.
    pub fn with_equal_loadings(&self) -> Result<Self> {
        let loadings = self
            .loadings
            .iter()
            .map(|e| if e.is_free() { Entry::Shared(0) } else { *e })
            .collect();
        ModelSpec::new(
            self.variables.clone(),
            self.factors.clone(),
            loadings,
            self.factor_cov.clone(),
            self.residuals.clone(),
        )
    }

    pub fn p(&self) -> usize {
        self.variables.len()
    }

    pub fn m(&self) -> usize {
        self.factors.len()
    }

    /// Number of free parameters.
    pub fn q(&self) -> usize {
        self.kinds.len()
    }

    pub fn pstar(&self) -> usize {
        pstar(self.p())
    }

    /// Model degrees of freedom `p* − q`.
    pub fn df(&self) -> i64 {
        self.pstar() as i64 - self.q() as i64
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    pub fn loading_entry(&self, var: usize, factor: usize) -> Entry {
        self.loadings[var + factor * self.p()]
    }

    pub fn residual_entry(&self, var: usize) -> Entry {
        self.residuals[var]
    }

    fn check_len(&self, theta: &ParamVector) -> Result<()> {
        if theta.len() != self.q() {
            return Err(Error::Dimension(format!("theta has length {}, model has q={}", theta.len(), self.q())));
        }
        Ok(())
    }

    /// Realized `(Λ, Φ, Ψ-diagonal)` for a parameter vector.
    pub fn matrices(&self, theta: &ParamVector) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        self.check_len(theta)?;
        let (p, m) = (self.p(), self.m());
        let mut lambda = DMatrix::from_fn(p, m, |i, k| match self.loadings[i + k * p] {
            Entry::Fixed(v) => v,
            _ => 0.0,
        });
        let mut phi = DMatrix::identity(m, m);
        for (e, &(r, c)) in self.factor_cov.iter().zip(factor_pairs(m).iter()) {
            if let Entry::Fixed(v) = e {
                phi[(r, c)] = *v;
                phi[(c, r)] = *v;
            }
        }
        let mut psi = DVector::from_fn(p, |i, _| match self.residuals[i] {
            Entry::Fixed(v) => v,
            _ => 0.0,
        });
        for slot in &self.slots {
            let v = theta.0[slot.param];
            match slot.target {
                Target::Loading { var, factor } => lambda[(var, factor)] = v,
                Target::FactorCov { row, col } => {
                    phi[(row, col)] = v;
                    phi[(col, row)] = v;
                }
                Target::Residual { var } => psi[var] = v,
            }
        }
        Ok((lambda, phi, psi))
    }

    /// Assembles θ from realized matrices (inverse of [`ModelSpec::matrices`] on the free entries).
    pub fn theta_from_matrices(&self, lambda: &DMatrix<f64>, phi: &DMatrix<f64>, psi: &[f64]) -> ParamVector {
        let mut sums = vec![0.0; self.q()];
        let mut counts = vec![0usize; self.q()];
        for slot in &self.slots {
            let v = match slot.target {
                Target::Loading { var, factor } => lambda[(var, factor)],
                Target::FactorCov { row, col } => phi[(row, col)],
                Target::Residual { var } => psi[var],
            };
            sums[slot.param] += v;
            counts[slot.param] += 1;
        }
        ParamVector::new(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
    }
}

/// `Σ(θ) = ΛΦΛ' + Ψ`. Positive definiteness is not enforced.
pub fn implied_covariance(spec: &ModelSpec, theta: &ParamVector) -> Result<SymMatrix> {
    let (lambda, phi, psi) = spec.matrices(theta)?;
    let mut sigma = &lambda * &phi * lambda.transpose();
    for i in 0..spec.p() {
        sigma[(i, i)] += psi[i];
    }
    SymMatrix::new(sigma)
}

pub fn implied_covariance_vech(spec: &ModelSpec, theta: &ParamVector) -> Result<HalfVec> {
    Ok(vech(&implied_covariance(spec, theta)?))
}

/// Analytic Jacobian `∂σ(θ)/∂θ'` of size `p*×q`. Shared parameters sum their slot columns.
pub fn jacobian(spec: &ModelSpec, theta: &ParamVector) -> Result<DMatrix<f64>> {
    let (lambda, phi, _) = spec.matrices(theta)?;
    let lphi = &lambda * &phi;
    let pairs = spec.pairs().pairs();
    let mut jac = DMatrix::zeros(pairs.len(), spec.q());
    for slot in &spec.slots {
        let mut col = jac.column_mut(slot.param);
        match slot.target {
            Target::Loading { var, factor } => {
                for (r, &(h, j)) in pairs.iter().enumerate() {
                    let mut d = 0.0;
                    if h == var {
                        d += lphi[(j, factor)];
                    }
                    if j == var {
                        d += lphi[(h, factor)];
                    }
                    col[r] += d;
                }
            }
            Target::FactorCov { row, col: c } => {
                for (r, &(h, j)) in pairs.iter().enumerate() {
                    col[r] += lambda[(h, row)] * lambda[(j, c)] + lambda[(h, c)] * lambda[(j, row)];
                }
            }
            Target::Residual { var } => {
                col[spec.pairs().position(var, var)] += 1.0;
            }
        }
    }
    Ok(jac)
}

/// Deterministic starting values: loadings `0.7·√S_jj`, factor covariances
/// 0.3, residual variances `0.5·S_jj`.
pub fn start_values(spec: &ModelSpec, s: &SymMatrix) -> Result<ParamVector> {
    if s.dim() != spec.p() {
        return Err(Error::Dimension("sample covariance does not match the model".into()));
    }
    if let Some(j) = (0..s.dim()).find(|&j| !(s.get(j, j) > 0.0)) {
        return Err(Error::InvalidData(format!("variable {} has nonpositive variance", spec.variables[j])));
    }
    let mut sums = vec![0.0; spec.q()];
    let mut counts = vec![0usize; spec.q()];
    for slot in &spec.slots {
        let v = match slot.target {
            Target::Loading { var, .. } => 0.7 * s.get(var, var).sqrt(),
            Target::FactorCov { .. } => 0.3,
            Target::Residual { var } => 0.5 * s.get(var, var),
        };
        sums[slot.param] += v;
        counts[slot.param] += 1;
    }
    Ok(ParamVector::new(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()))
}

/// Indices of free residual variances that are at or below zero.
pub fn heywood_params(spec: &ModelSpec, theta: &ParamVector) -> Vec<usize> {
    spec.param_kinds()
        .iter()
        .enumerate()
        .filter(|&(i, k)| *k == ParamKind::Residual && theta.0[i] <= 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// On-disk model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFile {
    pub variables: Vec<String>,
    pub factors: IndexMap<String, Vec<String>>,
    #[serde(default)]
    pub cross_loadings: Vec<(String, String)>,
    #[serde(default)]
    pub fixed: Vec<FixedValue>,
}

/// One fixed entry. Exactly one of `loading`, `factor_cov`, `residual` must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedValue {
    /// `[variable, factor]`
    #[serde(default)]
    pub loading: Option<(String, String)>,
    /// `[factor, factor]`
    #[serde(default)]
    pub factor_cov: Option<(String, String)>,
    #[serde(default)]
    pub residual: Option<String>,
    pub value: f64,
}

impl SpecFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_spec(&self) -> Result<ModelSpec> {
        let p = self.variables.len();
        let factors: Vec<String> = self.factors.keys().cloned().collect();
        let m = factors.len();
        let var_idx = |name: &str| {
            self.variables
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::InvalidSpec(format!("unknown variable {name}")))
        };
        let fac_idx = |name: &str| {
            factors.iter().position(|f| f == name).ok_or_else(|| Error::InvalidSpec(format!("unknown factor {name}")))
        };
        let mut loadings = vec![Entry::Fixed(0.0); p * m];
        for (k, indicators) in self.factors.values().enumerate() {
            for name in indicators {
                loadings[var_idx(name)? + k * p] = Entry::Free;
            }
        }
        for (v, f) in &self.cross_loadings {
            loadings[var_idx(v)? + fac_idx(f)? * p] = Entry::Free;
        }
        let mut factor_cov = vec![Entry::Free; m * (m - 1) / 2];
        let mut residuals = vec![Entry::Free; p];
        let fpairs = factor_pairs(m);
        for fx in &self.fixed {
            let set = [fx.loading.is_some(), fx.factor_cov.is_some(), fx.residual.is_some()];
            if set.iter().filter(|&&b| b).count() != 1 {
                return Err(Error::InvalidSpec(
                    "each fixed entry needs exactly one of loading, factor_cov, residual".into(),
                ));
            }
            if let Some((v, f)) = &fx.loading {
                loadings[var_idx(v)? + fac_idx(f)? * p] = Entry::Fixed(fx.value);
            } else if let Some((a, b)) = &fx.factor_cov {
                let (a, b) = (fac_idx(a)?, fac_idx(b)?);
                if a == b {
                    return Err(Error::InvalidSpec("factor variances are fixed at 1".into()));
                }
                let key = (a.max(b), a.min(b));
                let pos = fpairs.iter().position(|&x| x == key).expect("pair exists");
                factor_cov[pos] = Entry::Fixed(fx.value);
            } else if let Some(v) = &fx.residual {
                residuals[var_idx(v)?] = Entry::Fixed(fx.value);
            }
        }
        ModelSpec::new(self.variables.clone(), factors, loadings, factor_cov, residuals)
    }
}
