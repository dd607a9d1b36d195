//! Simulation populations, data generators, and bootstrap resampling.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{sym_inv_sqrt, sym_sqrt, SymMatrix};
use crate::model::{implied_covariance, ModelSpec, ParamVector};
use crate::moments::{sample_cov, DataMatrix};

/// Grid the population loadings are drawn from.
pub const LOADING_GRID: [f64; 6] = [0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const FACTOR_CORRELATION: f64 = 0.5;

/// Deterministic generator for stream `stream` of a seeded family.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct PopulationModel {
    pub spec: ModelSpec,
    pub theta_true: ParamVector,
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub psi: Vec<f64>,
    pub sigma: SymMatrix,
    phi_root: DMatrix<f64>,
}

/// Simple-cluster population with loadings drawn from [`LOADING_GRID`] and unit-diagonal `Σ`.
pub fn build_population(p: usize, m: usize, seed: u64) -> Result<PopulationModel> {
    let spec = ModelSpec::simple_cluster(p, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = p / m;
    let mut lambda = DMatrix::zeros(p, m);
    for j in 0..p {
        lambda[(j, j / per)] = LOADING_GRID[rng.random_range(0..LOADING_GRID.len())];
    }
    let phi = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { FACTOR_CORRELATION });
    let common = &lambda * &phi * lambda.transpose();
    let psi: Vec<f64> = (0..p).map(|j| 1.0 - common[(j, j)]).collect();
    if let Some(j) = psi.iter().position(|v| *v <= 0.0) {
        return Err(Error::Construction(format!("residual variance of variable {} is {}", j + 1, psi[j])));
    }
    let theta_true = spec.theta_from_matrices(&lambda, &phi, &psi);
    let sigma = implied_covariance(&spec, &theta_true)?;
    let phi_root = sym_sqrt(&SymMatrix::new(phi.clone())?)?.into_matrix();
    Ok(PopulationModel { spec, theta_true, lambda, phi, psi, sigma, phi_root })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Normal,
    Elliptical,
    SkewedFactor,
    SkewedError,
}

impl Condition {
    pub const ALL: [Condition; 4] =
        [Condition::Normal, Condition::Elliptical, Condition::SkewedFactor, Condition::SkewedError];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Elliptical => "elliptical",
            Condition::SkewedFactor => "skewed-factor",
            Condition::SkewedError => "skewed-error",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown condition '{s}'")))
    }
}

/// How the radial scale multiplies factors and residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadialMode {
    /// One draw per observation scales both `ξ` and `ε`.
    #[default]
    Shared,
    /// Separate draws for `ξ` and `ε`.
    Independent,
}

fn standardized_chisq1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (z * z - 1.0) / std::f64::consts::SQRT_2
}

/// Draws `n` observations `x = Λξ + ε` from `rng`.
pub fn generate_with<R: Rng + ?Sized>(
    pop: &PopulationModel,
    n: usize,
    cond: Condition,
    radial: RadialMode,
    rng: &mut R,
) -> Result<DataMatrix> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("sample size must be at least 2, got {n}")));
    }
    let p = pop.lambda.nrows();
    let m = pop.lambda.ncols();
    let chi5 = ChiSquared::<f64>::new(5.0).expect("valid degrees of freedom");
    let radius = |rng: &mut R| (3.0 / chi5.sample(rng)).sqrt();
    let psi_root: Vec<f64> = pop.psi.iter().map(|v| v.sqrt()).collect();
    let mut x = DMatrix::zeros(n, p);
    let mut zf = DVector::zeros(m);
    for i in 0..n {
        for k in 0..m {
            zf[k] = if cond == Condition::SkewedFactor { standardized_chisq1(rng) } else { rng.sample(StandardNormal) };
        }
        let mut ze: Vec<f64> = (0..p)
            .map(|_| if cond == Condition::SkewedError { standardized_chisq1(rng) } else { rng.sample(StandardNormal) })
            .collect();
        let (r_f, r_e) = match (cond, radial) {
            (Condition::Normal, _) => (1.0, 1.0),
            (_, RadialMode::Shared) => {
                let r = radius(rng);
                (r, r)
            }
            (_, RadialMode::Independent) => (radius(rng), radius(rng)),
        };
        let xi = &pop.phi_root * &zf * r_f;
        let common = &pop.lambda * xi;
        for (j, e) in ze.iter_mut().enumerate() {
            x[(i, j)] = common[j] + r_e * psi_root[j] * *e;
        }
    }
    let names = pop.spec.variables().to_vec();
    DataMatrix::new(names, x)
}

/// Seeded generation with the shared radial draw.
pub fn generate(pop: &PopulationModel, n: usize, cond: Condition, seed: u64) -> Result<DataMatrix> {
    generate_with(pop, n, cond, RadialMode::Shared, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Maps each row through `Σ̂^{1/2} S^{-1/2}` so the sample covariance becomes `Σ̂`.
pub fn bollen_stine_transform(x: &DataMatrix, sigma_hat: &SymMatrix) -> Result<DataMatrix> {
    if sigma_hat.dim() != x.p() {
        return Err(Error::Dimension(format!("Σ̂ is {}×{}, data have p={}", sigma_hat.dim(), sigma_hat.dim(), x.p())));
    }
    let s = sample_cov(x)?;
    let s_inv_root = sym_inv_sqrt(&s)?;
    let sigma_root = sym_sqrt(sigma_hat)?;
    if !sigma_hat.is_positive_definite() {
        let eig = sigma_hat.as_matrix().clone().symmetric_eigenvalues();
        return Err(Error::NotPsd { min_eig: eig.min(), max_eig: eig.max() });
    }
    let a = sigma_root.as_matrix() * s_inv_root.as_matrix();
    DataMatrix::new(x.names().to_vec(), x.rows() * a.transpose())
}

/// `n` rows drawn uniformly with replacement.
pub fn bootstrap_with<R: Rng + ?Sized>(x: &DataMatrix, rng: &mut R) -> Result<DataMatrix> {
    let n = x.n();
    if n == 0 {
        return Err(Error::InvalidData("cannot resample an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let rows = DMatrix::from_fn(n, x.p(), |i, j| x.rows()[(idx[i], j)]);
    DataMatrix::new(x.names().to_vec(), rows)
}

pub fn bootstrap_sample(x: &DataMatrix, seed: u64) -> Result<DataMatrix> {
    bootstrap_with(x, &mut ChaCha8Rng::seed_from_u64(seed))
}
