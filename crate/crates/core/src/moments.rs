//! Sample second- and fourth-order moments.
//!
//! Every divisor is `N`. `Γ̂_ADF` has entries `s_hjkl − s_hj·s_kl` in vech
//! pair order; `Γ_N(C)` has entries `c_hk·c_jl + c_hl·c_jk`.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{guarded_inverse, pstar, vech, HalfVec, PairIndex, SymMatrix};

/// `N×p` observations with variable names.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    names: Vec<String>,
    rows: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(names: Vec<String>, rows: DMatrix<f64>) -> Result<Self> {
        if names.len() != rows.ncols() {
            return Err(Error::Dimension(format!("{} names for {} columns", names.len(), rows.ncols())));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("data contain non-finite values".into()));
        }
        Ok(DataMatrix { names, rows })
    }

    /// Unnamed columns get `x1, x2, …`.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        let names = (1..=rows.ncols()).map(|i| format!("x{i}")).collect();
        DataMatrix::new(names, rows)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidData("ragged rows".into()));
        }
        DataMatrix::from_matrix(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
    }

    /// Reads CSV with a header row of names and strictly numeric fields.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::InvalidData("CSV has no columns".into()));
        }
        let mut values = Vec::new();
        let mut n = 0usize;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != names.len() {
                return Err(Error::InvalidData(format!("row {} has {} fields", line + 1, rec.len())));
            }
            for (field, name) in rec.iter().zip(&names) {
                let v: f64 = field.parse().map_err(|_| {
                    Error::InvalidData(format!("row {}, column {name}: '{field}' is not numeric", line + 1))
                })?;
                values.push(v);
            }
            n += 1;
        }
        let p = names.len();
        DataMatrix::new(names, DMatrix::from_row_slice(n, p, &values))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        DataMatrix::from_csv_reader(f)
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Reorders columns to match `order`; errors on unknown names.
    pub fn select(&self, order: &[String]) -> Result<DataMatrix> {
        let idx: Vec<usize> = order
            .iter()
            .map(|name| {
                self.names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::InvalidData(format!("data have no column {name}")))
            })
            .collect::<Result<_>>()?;
        let rows = DMatrix::from_fn(self.n(), idx.len(), |i, j| self.rows[(i, idx[j])]);
        DataMatrix::new(order.to_vec(), rows)
    }

    fn centered(&self) -> DMatrix<f64> {
        let mut c = self.rows.clone();
        for mut col in c.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        c
    }

    fn require_n(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::InvalidData(format!("need at least 2 observations, got {}", self.n())));
        }
        Ok(())
    }
}

/// Moments needed by every estimator, computed once per dataset.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub s: SymMatrix,
    pub s_vech: HalfVec,
    pub gamma_adf: SymMatrix,
    pub n: usize,
}

impl MomentSet {
    pub fn from_data(x: &DataMatrix) -> Result<Self> {
        let s = sample_cov(x)?;
        let gamma_adf = gamma_adf(x)?;
        Ok(MomentSet { s_vech: vech(&s), s, gamma_adf, n: x.n() })
    }

    pub fn p(&self) -> usize {
        self.s.dim()
    }
}

/// `S = (1/N) Σ (x_i − x̄)(x_i − x̄)'`.
pub fn sample_cov(x: &DataMatrix) -> Result<SymMatrix> {
    x.require_n()?;
    let c = x.centered();
    SymMatrix::new(c.transpose() * &c / x.n() as f64)
}

/// Distribution-free estimate of the asymptotic covariance of `√N·s`.
pub fn gamma_adf(x: &DataMatrix) -> Result<SymMatrix> {
    x.require_n()?;
    let n = x.n();
    let idx = PairIndex::new(x.p());
    let c = x.centered();
    let mut z = DMatrix::zeros(n, idx.len());
    for i in 0..n {
        for (k, &(h, j)) in idx.pairs().iter().enumerate() {
            z[(i, k)] = c[(i, h)] * c[(i, j)];
        }
    }
    for mut col in z.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    SymMatrix::new(z.transpose() * &z / n as f64)
}

/// Normal-theory asymptotic covariance `{Γ_N}_{hj,kl} = c_hk c_jl + c_hl c_jk`.
pub fn gamma_normal(c: &SymMatrix) -> SymMatrix {
    let idx = PairIndex::new(c.dim());
    let pairs = idx.pairs();
    let n = pstar(c.dim());
    let m = c.as_matrix();
    let mut out = DMatrix::zeros(n, n);
    for (r, &(h, j)) in pairs.iter().enumerate() {
        for (s, &(k, l)) in pairs.iter().enumerate().skip(r) {
            let v = m[(h, k)] * m[(j, l)] + m[(h, l)] * m[(j, k)];
            out[(r, s)] = v;
            out[(s, r)] = v;
        }
    }
    SymMatrix::from_symmetric_unchecked(out)
}

/// Centered rows whitened by the Cholesky factor of `S`, so `y_i'y_j = c_i'S⁻¹c_j`.
fn whitened(x: &DataMatrix) -> Result<DMatrix<f64>> {
    let s = sample_cov(x)?;
    guarded_inverse(&s).map_err(|_| Error::InvalidData("sample covariance is singular".into()))?;
    let chol = s.as_matrix().clone().cholesky().ok_or_else(|| Error::InvalidData("sample covariance is singular".into()))?;
    let c = x.centered();
    Ok(chol.l().solve_lower_triangular(&c.transpose()).expect("nonsingular factor"))
}

/// Multivariate skewness `(1/(N·p(p+1)(p+2))) ΣΣ g_ij³`, near 1 for normal data.
///
/// Uses `ΣΣ (y_i'y_j)³ = Σ_abc (Σ_i y_ia y_ib y_ic)²` to stay linear in `N`.
pub fn multivariate_skewness(x: &DataMatrix) -> Result<f64> {
    let y = whitened(x)?;
    let p = x.p();
    let mut total = 0.0;
    for a in 0..p {
        for b in 0..p {
            for c in 0..p {
                let m: f64 = y.column_iter().map(|col| col[a] * col[b] * col[c]).sum();
                total += m * m;
            }
        }
    }
    let pf = p as f64;
    Ok(total / (x.n() as f64 * pf * (pf + 1.0) * (pf + 2.0)))
}

/// Multivariate kurtosis `(1/(N·p(p+2))) Σ g_ii²`, near 1 for normal data.
pub fn multivariate_kurtosis(x: &DataMatrix) -> Result<f64> {
    let y = whitened(x)?;
    let p = x.p() as f64;
    let total: f64 = y.column_iter().map(|col| col.norm_squared().powi(2)).sum();
    Ok(total / (x.n() as f64 * p * (p + 2.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_data(n: usize, p: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DataMatrix::from_matrix(DMatrix::from_fn(n, p, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z + 0.3 * z * z
        }))
        .unwrap()
    }

    fn naive_cov(x: &DataMatrix) -> DMatrix<f64> {
        let (n, p) = (x.n(), x.p());
        let mut mean = vec![0.0; p];
        for j in 0..p {
            for i in 0..n {
                mean[j] += x.rows()[(i, j)];
            }
            mean[j] /= n as f64;
        }
        DMatrix::from_fn(p, p, |a, b| {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (x.rows()[(i, a)] - mean[a]) * (x.rows()[(i, b)] - mean[b]);
            }
            acc / n as f64
        })
    }

    fn quadruple_loop_gamma(x: &DataMatrix) -> DMatrix<f64> {
        let (n, p) = (x.n(), x.p());
        let s = naive_cov(x);
        let mean: Vec<f64> = (0..p).map(|j| x.rows().column(j).sum() / n as f64).collect();
        let d = |i: usize, j: usize| x.rows()[(i, j)] - mean[j];
        let idx = PairIndex::new(p);
        let pairs = idx.pairs();
        DMatrix::from_fn(pairs.len(), pairs.len(), |r, c| {
            let (h, j) = pairs[r];
            let (k, l) = pairs[c];
            let mut s4 = 0.0;
            for i in 0..n {
                s4 += d(i, h) * d(i, j) * d(i, k) * d(i, l);
            }
            s4 / n as f64 - s[(h, j)] * s[(k, l)]
        })
    }

    #[test]
    fn constant_column_has_zero_variance() {
        let x = DataMatrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0], vec![4.0, 3.0]]).unwrap();
        assert_eq!(sample_cov(&x).unwrap().get(1, 1), 0.0);
    }

    #[test]
    fn univariate_hand_case() {
        let x = DataMatrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(sample_cov(&x).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn too_few_rows() {
        let x = DataMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sample_cov(&x), Err(Error::InvalidData(_))));
    }

    #[test]
    fn sample_cov_matches_two_pass_oracle() {
        let x = random_data(50, 4, 1);
        let diff = sample_cov(&x).unwrap().as_matrix() - naive_cov(&x);
        assert!(diff.amax() < 1e-12);
    }

    #[test]
    fn gamma_adf_exact_on_hand_data() {
        let x = DataMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let g = gamma_adf(&x).unwrap();
        assert_eq!(g.as_matrix(), &quadruple_loop_gamma(&x));
    }

    #[test]
    fn gamma_adf_matches_oracle_on_random_data() {
        let x = random_data(30, 3, 7);
        let diff = gamma_adf(&x).unwrap().as_matrix() - quadruple_loop_gamma(&x);
        assert!(diff.amax() < 1e-12);
    }

    #[test]
    fn gamma_normal_identity_entries() {
        let g = gamma_normal(&SymMatrix::identity(3));
        let idx = PairIndex::new(3);
        for (r, &(h, j)) in idx.pairs().iter().enumerate() {
            for c in 0..idx.len() {
                let expect = if r != c {
                    0.0
                } else if h == j {
                    2.0
                } else {
                    1.0
                };
                assert_eq!(g.get(r, c), expect);
            }
        }
    }

    #[test]
    fn gamma_normal_diagonal_plug_in() {
        let g = gamma_normal(&SymMatrix::from_diagonal(&[2.0, 3.0]));
        assert_eq!(g.get(0, 0), 8.0);
        assert_eq!(g.get(1, 1), 6.0);
        assert_eq!(g.get(2, 2), 18.0);
    }

    #[test]
    fn gamma_normal_inverse_is_half_kron() {
        // Γ_N(C)^{-1} = ½ D'(C^{-1}⊗C^{-1})D
        let c = SymMatrix::from_rows(&[&[2.0, 0.3, 0.1], &[0.3, 1.5, -0.2], &[0.1, -0.2, 1.0]]).unwrap();
        let inv = guarded_inverse(&gamma_normal(&c)).unwrap().inverse;
        let ci = guarded_inverse(&c).unwrap().inverse;
        let k = crate::matrix::kron_vech(ci.as_matrix(), ci.as_matrix(), &PairIndex::new(3)) * 0.5;
        assert!((inv.as_matrix() - k).amax() < 1e-12);
    }

    #[test]
    fn gamma_normal_is_psd_for_spd_input() {
        let x = random_data(40, 4, 3);
        let g = gamma_normal(&sample_cov(&x).unwrap());
        assert!(g.as_matrix().clone().symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn gammas_follow_variable_permutation() {
        let x = random_data(25, 3, 9);
        let perm = [2usize, 0, 1];
        let names: Vec<String> = perm.iter().map(|&i| x.names()[i].clone()).collect();
        let xp = x.select(&names).unwrap();
        let (g, gp) = (gamma_adf(&x).unwrap(), gamma_adf(&xp).unwrap());
        let (n, np) = (gamma_normal(&sample_cov(&x).unwrap()), gamma_normal(&sample_cov(&xp).unwrap()));
        let idx = PairIndex::new(3);
        for (r, &(h, j)) in idx.pairs().iter().enumerate() {
            for (c, &(k, l)) in idx.pairs().iter().enumerate() {
                let r0 = idx.position(perm[h], perm[j]);
                let c0 = idx.position(perm[k], perm[l]);
                assert!((gp.get(r, c) - g.get(r0, c0)).abs() < 1e-12);
                assert!((np.get(r, c) - n.get(r0, c0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_adf_approaches_normal_theory() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = DataMatrix::from_matrix(DMatrix::from_fn(100_000, 3, |_, _| rng.sample(StandardNormal))).unwrap();
        let g = gamma_adf(&x).unwrap();
        let gn = gamma_normal(&SymMatrix::identity(3));
        assert!((g.as_matrix() - gn.as_matrix()).amax() < 0.1);
    }

    #[test]
    fn skewness_kurtosis_match_direct_loops() {
        let x = DataMatrix::from_rows(&[
            vec![0.1, 1.2],
            vec![2.0, 0.3],
            vec![-1.0, 0.8],
            vec![0.5, -0.7],
            vec![3.1, 2.2],
        ])
        .unwrap();
        let (n, p) = (5usize, 2usize);
        let s = naive_cov(&x);
        let si = s.clone().try_inverse().unwrap();
        let mean: Vec<f64> = (0..p).map(|j| x.rows().column(j).sum() / n as f64).collect();
        let g = |i: usize, j: usize| {
            let mut acc = 0.0;
            for a in 0..p {
                for b in 0..p {
                    acc += (x.rows()[(i, a)] - mean[a]) * si[(a, b)] * (x.rows()[(j, b)] - mean[b]);
                }
            }
            acc
        };
        let mut sk = 0.0;
        let mut ku = 0.0;
        for i in 0..n {
            for j in 0..n {
                sk += g(i, j).powi(3);
            }
            ku += g(i, i).powi(2);
        }
        let pf = p as f64;
        sk /= n as f64 * pf * (pf + 1.0) * (pf + 2.0);
        ku /= n as f64 * pf * (pf + 2.0);
        assert!((multivariate_skewness(&x).unwrap() - sk).abs() < 1e-12);
        assert!((multivariate_kurtosis(&x).unwrap() - ku).abs() < 1e-12);
    }

    #[test]
    fn singular_data_is_rejected_for_shape_statistics() {
        let x = DataMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(multivariate_kurtosis(&x), Err(Error::InvalidData(_))));
    }

    #[test]
    fn csv_parsing() {
        let text = "a,b\n1,2\n3,4.5\n";
        let x = DataMatrix::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(x.n(), 2);
        assert_eq!(x.names(), ["a", "b"]);
        assert_eq!(x.rows()[(1, 1)], 4.5);
        assert!(DataMatrix::from_csv_reader("a,b\n1,x\n".as_bytes()).is_err());
        assert!(DataMatrix::from_csv_reader("a,b\n1,\n".as_bytes()).is_err());
    }
}
