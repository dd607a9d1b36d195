//! Symmetric-matrix utilities shared by every estimator.
//!
//! Half-vectorization uses the column-major lower triangle: for a `p×p`
//! matrix the pairs are `(0,0), (1,0), …, (p-1,0), (1,1), (2,1), …`. All
//! fourth-moment matrices are indexed by the same [`PairIndex`] so that
//! `vech`, `Γ` and the Jacobian rows agree.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance used by [`rank_with_tol`] when no tolerance is given.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Reciprocal-condition floor below which [`guarded_inverse`] refuses to invert.
pub const MIN_RCOND: f64 = 1e-14;

/// Eigenvalues below `-PSD_TOL * max_eig` make a matrix "not PSD".
pub const PSD_TOL: f64 = 1e-10;

/// Number of non-duplicated elements of a symmetric `p×p` matrix.
pub fn pstar(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Inverse of [`pstar`]: returns `p` when `len` is triangular.
pub fn triangular_root(len: usize) -> Option<usize> {
    let mut p = 0usize;
    while pstar(p) < len {
        p += 1;
    }
    (pstar(p) == len && p > 0).then_some(p)
}

/// Canonical ordering of the `(row, col)` pairs with `row >= col`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    p: usize,
    pairs: Vec<(usize, usize)>,
    lookup: Vec<usize>,
}

impl PairIndex {
    pub fn new(p: usize) -> Self {
        let mut pairs = Vec::with_capacity(pstar(p));
        let mut lookup = vec![0usize; p * p];
        for j in 0..p {
            for i in j..p {
                lookup[i + j * p] = pairs.len();
                lookup[j + i * p] = pairs.len();
                pairs.push((i, j));
            }
        }
        PairIndex { p, pairs, lookup }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Position of the unordered pair `{i, j}` in vech order.
    pub fn position(&self, i: usize, j: usize) -> usize {
        self.lookup[i + j * self.p]
    }
}

/// Dense symmetric matrix. Construction symmetrizes the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds a symmetric matrix from `m`, averaging `m` and its transpose.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "expected a nonempty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut m = m;
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(SymMatrix(m))
    }

    /// Wraps a matrix the caller guarantees to be exactly symmetric.
    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        SymMatrix(m)
    }

    pub fn identity(p: usize) -> Self {
        SymMatrix(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("rows must form a square matrix".into()));
        }
        SymMatrix::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// `a·self + b·other`, computed entrywise.
    pub fn blend(&self, a: f64, other: &SymMatrix, b: f64) -> SymMatrix {
        SymMatrix(self.0.zip_map(&other.0, |x, y| a * x + b * y))
    }

    /// Diagonal part of the matrix.
    pub fn diag_part(&self) -> SymMatrix {
        SymMatrix::from_diagonal(&self.diagonal())
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    /// Returns `true` when a Cholesky factorization succeeds.
    pub fn is_positive_definite(&self) -> bool {
        self.0.clone().cholesky().is_some()
    }
}

/// Half-vectorization of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfVec {
    p: usize,
    values: DVector<f64>,
}

impl HalfVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let p = triangular_root(values.len()).ok_or_else(|| {
            Error::Dimension(format!("length {} is not a triangular number", values.len()))
        })?;
        Ok(HalfVec { p, values: DVector::from_vec(values) })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }
}

pub fn vech(m: &SymMatrix) -> HalfVec {
    let p = m.dim();
    let mut values = Vec::with_capacity(pstar(p));
    for j in 0..p {
        for i in j..p {
            values.push(m.0[(i, j)]);
        }
    }
    HalfVec { p, values: DVector::from_vec(values) }
}

pub fn unvech(v: &HalfVec) -> SymMatrix {
    let p = v.p;
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            m[(i, j)] = v.values[k];
            m[(j, i)] = v.values[k];
            k += 1;
        }
    }
    SymMatrix(m)
}

/// Symmetric PSD square root via eigendecomposition.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    spectral_map(m, false, f64::sqrt)
}

/// Symmetric inverse square root; requires a positive definite input.
pub fn sym_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    spectral_map(m, true, |l| 1.0 / l.sqrt())
}

fn spectral_map(m: &SymMatrix, strict: bool, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
    let eig = m.0.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    let floor = -PSD_TOL * max_eig.abs().max(f64::MIN_POSITIVE);
    if min_eig < floor || (strict && min_eig <= 0.0) || !max_eig.is_finite() {
        return Err(Error::NotPsd { min_eig, max_eig });
    }
    let mapped = eig.eigenvalues.map(|l| if l > 0.0 { f(l) } else { 0.0 });
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&mapped) * q.transpose();
    SymMatrix::new(r)
}

/// Inverse of a symmetric matrix together with its reciprocal 1-norm condition number.
#[derive(Debug, Clone)]
pub struct GuardedInverse {
    pub inverse: SymMatrix,
    pub rcond: f64,
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Inverts a symmetric positive definite matrix through its Cholesky factor.
///
/// A failed factorization or a reciprocal condition below [`MIN_RCOND`]
/// yields [`Error::SingularWeight`]; nothing is regularized.
pub fn guarded_inverse(m: &SymMatrix) -> Result<GuardedInverse> {
    let chol = m.0.clone().cholesky().ok_or(Error::SingularWeight { rcond: 0.0 })?;
    let inv = chol.inverse();
    let norm = one_norm(&m.0);
    let inv_norm = one_norm(&inv);
    let rcond = if norm == 0.0 || !inv_norm.is_finite() { 0.0 } else { 1.0 / (norm * inv_norm) };
    if !(rcond >= MIN_RCOND) {
        return Err(Error::SingularWeight { rcond });
    }
    Ok(GuardedInverse { inverse: SymMatrix::new(inv)?, rcond })
}

/// Counts singular values above `rel_tol` times the largest one.
///
/// Accepts a general square matrix: products such as `UΓ` are not symmetric.
pub fn rank_with_tol(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max <= 0.0 || !max.is_finite() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// `D'(B⊗C)D` restricted to vech coordinates, with `D` the duplication matrix.
///
/// Entry `(hj, kl)` sums `B[b,d]·C[a,c]` over `(a,b) ∈ {(h,j),(j,h)}` and
/// `(c,d) ∈ {(k,l),(l,k)}`, counting each distinct vec position once.
pub fn kron_vech(b: &DMatrix<f64>, c: &DMatrix<f64>, idx: &PairIndex) -> DMatrix<f64> {
    let n = idx.len();
    let pairs = idx.pairs();
    let mut out = DMatrix::zeros(n, n);
    let positions = |(i, j): (usize, usize)| -> ([(usize, usize); 2], usize) {
        if i == j {
            ([(i, j), (i, j)], 1)
        } else {
            ([(i, j), (j, i)], 2)
        }
    };
    for (r, &rp) in pairs.iter().enumerate() {
        let (rows, nr) = positions(rp);
        for (s, &sp) in pairs.iter().enumerate().skip(r) {
            let (cols, nc) = positions(sp);
            let mut acc = 0.0;
            for &(a, bb) in &rows[..nr] {
                for &(cc, d) in &cols[..nc] {
                    acc += b[(bb, d)] * c[(a, cc)];
                }
            }
            out[(r, s)] = acc;
            out[(s, r)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(p: usize, seed: u64) -> SymMatrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = DMatrix::from_fn(p, p, |_, _| next());
        SymMatrix::new(&a * a.transpose() + DMatrix::identity(p, p) * 0.1).unwrap()
    }

    #[test]
    fn vech_small_cases() {
        assert_eq!(vech(&SymMatrix::identity(2)).as_slice(), &[1.0, 0.0, 1.0]);
        let m = SymMatrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]).unwrap();
        assert_eq!(vech(&m).as_slice(), &[4.0, 2.0, 3.0]);
    }

    #[test]
    fn unvech_small_cases() {
        let v = HalfVec::new(vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(unvech(&v), SymMatrix::identity(2));
        let v = HalfVec::new(vec![4.0, 2.0, 3.0]).unwrap();
        assert_eq!(unvech(&v), SymMatrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]).unwrap());
        assert!(matches!(HalfVec::new(vec![0.0; 4]), Err(Error::Dimension(_))));
    }

    #[test]
    fn pair_index_matches_vech_order() {
        let idx = PairIndex::new(4);
        assert_eq!(idx.pairs()[..5], [(0, 0), (1, 0), (2, 0), (3, 0), (1, 1)]);
        for (k, &(i, j)) in idx.pairs().iter().enumerate() {
            assert_eq!(idx.position(i, j), k);
            assert_eq!(idx.position(j, i), k);
        }
    }

    #[test]
    fn sym_sqrt_cases() {
        let r = sym_sqrt(&SymMatrix::identity(3)).unwrap();
        assert!((r.as_matrix() - DMatrix::identity(3, 3)).norm() < 1e-14);
        let r = sym_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-14 && (r.get(1, 1) - 3.0).abs() < 1e-14);
        assert!(r.get(0, 1).abs() < 1e-14);

        let m = random_spd(6, 3);
        let r = sym_sqrt(&m).unwrap();
        let rr = r.as_matrix() * r.as_matrix();
        assert!((rr - m.as_matrix()).norm() / m.frobenius() < 1e-10);
        // commutes with the input
        let c = r.as_matrix() * m.as_matrix() - m.as_matrix() * r.as_matrix();
        assert!(c.norm() < 1e-9);
    }

    #[test]
    fn sym_sqrt_rejects_indefinite() {
        let m = SymMatrix::from_diagonal(&[1.0, -0.5]);
        assert!(matches!(sym_sqrt(&m), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn guarded_inverse_cases() {
        let inv = guarded_inverse(&SymMatrix::identity(3)).unwrap();
        assert_eq!(inv.inverse, SymMatrix::identity(3));
        assert!((inv.rcond - 1.0).abs() < 1e-15);
        let inv = guarded_inverse(&SymMatrix::from_diagonal(&[2.0, 4.0])).unwrap();
        assert!((inv.inverse.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((inv.inverse.get(1, 1) - 0.25).abs() < 1e-15);

        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let outer = SymMatrix::new(&v * v.transpose()).unwrap();
        assert!(matches!(guarded_inverse(&outer), Err(Error::SingularWeight { .. })));
    }

    #[test]
    fn rank_cases() {
        assert_eq!(rank_with_tol(&DMatrix::identity(5, 5), DEFAULT_RANK_TOL), 5);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, -4.0]);
        assert_eq!(rank_with_tol(&(&v * v.transpose()), DEFAULT_RANK_TOL), 1);
        assert_eq!(rank_with_tol(&DMatrix::zeros(3, 3), DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn kron_vech_identity_gives_duplication_gram() {
        // D'D has 1 on diagonal pairs and 2 on off-diagonal pairs.
        let idx = PairIndex::new(3);
        let i3 = DMatrix::identity(3, 3);
        let g = kron_vech(&i3, &i3, &idx);
        for (k, &(i, j)) in idx.pairs().iter().enumerate() {
            assert_eq!(g[(k, k)], if i == j { 1.0 } else { 2.0 });
        }
        assert_eq!(g.sum(), 1.0 * 3.0 + 2.0 * 3.0);
    }

    proptest! {
        #[test]
        fn vech_roundtrip(p in 1usize..7, seed in any::<u64>()) {
            let m = random_spd(p, seed);
            prop_assert_eq!(unvech(&vech(&m)), m);
        }

        #[test]
        fn rank_is_scale_invariant(p in 2usize..6, k in 1usize..4, seed in any::<u64>(), c in 1e-3f64..1e3) {
            let k = k.min(p);
            let full = random_spd(p, seed);
            let cols = full.as_matrix().columns(0, k).into_owned();
            let low = &cols * cols.transpose();
            prop_assert_eq!(rank_with_tol(&low, DEFAULT_RANK_TOL), k);
            prop_assert_eq!(rank_with_tol(&(&low * c), DEFAULT_RANK_TOL), k);
        }
    }
}
