//! Test statistics for overall model fit and their scaled or adjusted forms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::estimation::{FitResult, Method};
use crate::inference::{inference_weight, InfoVariant};
use crate::matrix::{rank_with_tol, SymMatrix, DEFAULT_RANK_TOL};
use crate::model::{jacobian, ModelSpec};
use crate::moments::MomentSet;

/// Upper tail of the chi-square distribution.
pub fn chisq_sf(x: f64, df: f64) -> f64 {
    if x.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df / 2.0, x / 2.0)
}

/// `U = W − WJ(J'WJ)⁻¹J'W`.
pub fn u_matrix(w: &SymMatrix, jac: &DMatrix<f64>) -> Result<SymMatrix> {
    let wj = w.as_matrix() * jac;
    let info = jac.transpose() * &wj;
    let inv = info.cholesky().ok_or(Error::SingularInformation)?.inverse();
    SymMatrix::new(w.as_matrix() - &wj * inv * wj.transpose())
}

/// Multiplier applied to the minimized discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Multiplier {
    /// `(N − 1)·F`.
    NMinusOne,
    /// `N·F`.
    N,
}

impl Multiplier {
    pub fn for_method(method: &Method) -> Self {
        if method.kind.is_ml() {
            Multiplier::N
        } else {
            Multiplier::NMinusOne
        }
    }

    pub fn apply(self, loss: f64, n: usize) -> f64 {
        match self {
            Multiplier::NMinusOne => (n as f64 - 1.0) * loss,
            Multiplier::N => n as f64 * loss,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitStatistics {
    pub df: usize,
    pub t: f64,
    pub p_t: f64,
    pub trace_ug: f64,
    pub trace_ug2: f64,
    pub rank_ug: usize,
    pub t_sb: f64,
    pub p_sb: f64,
    pub t_mva: f64,
    pub df_mva: f64,
    pub p_mva: f64,
    pub t_jy: f64,
    /// `T_JY` referred to `χ²` with `rank(ÛΓ̂)` degrees of freedom.
    pub p_jy: f64,
    /// `T_JY` referred to `χ²_df`.
    pub p_jy_df: f64,
}

/// Scaled and adjusted statistics from an unscaled `T`.
pub fn adjusted_statistics(t: f64, u: &SymMatrix, gamma: &SymMatrix, df: usize) -> Result<FitStatistics> {
    if df == 0 {
        return Err(Error::DegenerateStatistic("model has zero degrees of freedom".into()));
    }
    if !t.is_finite() {
        return Err(Error::DegenerateStatistic("statistic is not finite".into()));
    }
    let ug = u.as_matrix() * gamma.as_matrix();
    let tr = ug.trace();
    let tr2 = (&ug * &ug).trace();
    let rank = rank_with_tol(&ug, DEFAULT_RANK_TOL);
    if !(tr > 0.0) || !(tr2 > 0.0) || rank == 0 {
        return Err(Error::DegenerateStatistic(format!("tr(UΓ)={tr:e}, tr((UΓ)²)={tr2:e}")));
    }
    let dff = df as f64;
    let t_sb = t * dff / tr;
    let c_mva = tr2 / tr;
    let df_mva = tr * tr / tr2;
    let t_mva = t / c_mva;
    let t_jy = t * rank as f64 / tr;
    Ok(FitStatistics {
        df,
        t,
        p_t: chisq_sf(t, dff),
        trace_ug: tr,
        trace_ug2: tr2,
        rank_ug: rank,
        t_sb,
        p_sb: chisq_sf(t_sb, dff),
        t_mva,
        df_mva,
        p_mva: chisq_sf(t_mva, df_mva),
        t_jy,
        p_jy: chisq_sf(t_jy, rank as f64),
        p_jy_df: chisq_sf(t_jy, dff),
    })
}

/// All statistics for a finished fit.
pub fn fit_statistics(fit: &FitResult, method: &Method, moments: &MomentSet, spec: &ModelSpec) -> Result<FitStatistics> {
    let df = spec.df();
    if df <= 0 {
        return Err(Error::DegenerateStatistic("model has no positive degrees of freedom".into()));
    }
    let variant = InfoVariant::for_method(method.kind).map(|_| InfoVariant::ExpectedModel);
    let w = inference_weight(fit, method, moments, spec, variant)?;
    let jac = jacobian(spec, &fit.theta)?;
    let u = u_matrix(&w, &jac)?;
    let t = Multiplier::for_method(method).apply(fit.loss, moments.n);
    adjusted_statistics(t, &u, &moments.gamma_adf, df as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::guarded_inverse;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd(p: usize, rng: &mut impl Rng) -> SymMatrix {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::new(&a * a.transpose() + DMatrix::identity(p, p) * 0.5).unwrap()
    }

    #[test]
    fn chisq_reference_values() {
        // Table values of the chi-square upper tail.
        assert!((chisq_sf(3.841458820694124, 1.0) - 0.05).abs() < 1e-12);
        assert!((chisq_sf(18.307038053275146, 10.0) - 0.05).abs() < 1e-12);
        assert!((chisq_sf(2.0, 2.0) - (-1.0f64).exp()).abs() < 1e-14);
        assert_eq!(chisq_sf(0.0, 5.0), 1.0);
        assert!(chisq_sf(1.0, 0.0).is_nan());
    }

    #[test]
    fn u_annihilates_jacobian_and_has_rank_pstar_minus_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = spd(10, &mut rng);
        let jac = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let u = u_matrix(&w, &jac).unwrap();
        assert!((u.as_matrix() * &jac).amax() < 1e-10);
        assert_eq!(rank_with_tol(u.as_matrix(), DEFAULT_RANK_TOL), 6);
    }

    #[test]
    fn normal_gamma_gives_unit_scaling() {
        // With Γ = W⁻¹, UΓ is idempotent of rank df, so all corrections vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = spd(10, &mut rng);
        let gamma = guarded_inverse(&w).unwrap().inverse;
        let jac = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let u = u_matrix(&w, &jac).unwrap();
        let s = adjusted_statistics(12.5, &u, &gamma, 6).unwrap();
        assert!((s.trace_ug - 6.0).abs() < 1e-9);
        assert!((s.trace_ug2 - 6.0).abs() < 1e-9);
        assert_eq!(s.rank_ug, 6);
        assert!((s.t_sb - 12.5).abs() < 1e-8);
        assert!((s.t_mva - 12.5).abs() < 1e-8);
        assert!((s.df_mva - 6.0).abs() < 1e-8);
        assert!((s.t_jy - 12.5).abs() < 1e-8);
        assert!((s.p_jy - s.p_t).abs() < 1e-10);
    }

    #[test]
    fn degenerate_trace_is_an_error() {
        let u = SymMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let r = adjusted_statistics(1.0, &u, &SymMatrix::identity(3), 2);
        assert!(matches!(r, Err(Error::DegenerateStatistic(_))));
        let r = adjusted_statistics(1.0, &SymMatrix::identity(3), &SymMatrix::identity(3), 0);
        assert!(matches!(r, Err(Error::DegenerateStatistic(_))));
    }

    #[test]
    fn multiplier_choice() {
        use crate::estimation::MethodKind;
        assert_eq!(Multiplier::for_method(&Method::plain(MethodKind::MlEm)), Multiplier::N);
        assert_eq!(Multiplier::for_method(&Method::plain(MethodKind::GlsM)), Multiplier::NMinusOne);
        assert_eq!(Multiplier::NMinusOne.apply(0.5, 101), 50.0);
    }

    proptest! {
        #[test]
        fn p_values_lie_in_unit_interval(seed in 0u64..500, t in 0.0f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = spd(6, &mut rng);
            let gamma = spd(6, &mut rng);
            let jac = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
            let u = u_matrix(&w, &jac).unwrap();
            let s = adjusted_statistics(t, &u, &gamma, 4).unwrap();
            for p in [s.p_t, s.p_sb, s.p_mva, s.p_jy, s.p_jy_df] {
                prop_assert!((0.0..=1.0).contains(&p));
            }
            prop_assert!(s.df_mva > 0.0);
            prop_assert!(s.rank_ug <= 4);
        }

        #[test]
        fn chisq_sf_is_monotone(df in 0.5f64..60.0, x in 0.0f64..100.0, dx in 0.0f64..10.0) {
            prop_assert!(chisq_sf(x + dx, df) <= chisq_sf(x, df) + 1e-15);
        }
    }
}
