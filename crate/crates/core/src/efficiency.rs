//! Finite-`T` efficiency quantities for `alpha` and the factors.
//!
//! `gamma_T = T^{-1} tr(L D L' D^{-1})` is the variance of the efficient score
//! for `alpha` per unit of `NT`; `nu_T = T^{-1} tr((LF)' M (LF))` is the extra
//! information available when the factor perturbations are square-summable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::apply_l_rows;
use crate::structural::{build_structural, invert_gram};

fn check_variances(sigma2s: &DVector<f64>) -> Result<()> {
    if sigma2s.len() < 2 {
        return invalid(format!("need at least two periods, got {}", sigma2s.len()));
    }
    if sigma2s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return invalid("variances must be positive and finite");
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.abs() < 1.0) {
        return invalid(format!("|alpha| = {} is not below 1", alpha.abs()));
    }
    Ok(())
}

/// Recursion `s_t = sigma_{t-1}^2 + alpha^2 s_{t-1}` with no restriction on
/// `alpha`; used for plug-in standard errors at any estimate.
pub(crate) fn gamma_recursion(alpha: f64, sigma2s: &DVector<f64>) -> f64 {
    let a2 = alpha * alpha;
    let mut s = 0.0;
    let mut total = 0.0;
    for t in 1..sigma2s.len() {
        s = sigma2s[t - 1] + a2 * s;
        total += s / sigma2s[t];
    }
    total / sigma2s.len() as f64
}

/// `T^{-1} sum_{t>=2} sigma_t^{-2} (sigma_{t-1}^2 + alpha^2 sigma_{t-2}^2 + ... + alpha^{2(t-2)} sigma_1^2)`
pub fn gamma_t_closed(alpha: f64, sigma2s: &DVector<f64>) -> Result<f64> {
    check_alpha(alpha)?;
    check_variances(sigma2s)?;
    Ok(gamma_recursion(alpha, sigma2s))
}

/// `T^{-1} tr(L D L' D^{-1})` from the dense lag matrix.
pub fn gamma_t_trace(alpha: f64, sigma2s: &DVector<f64>) -> Result<f64> {
    check_alpha(alpha)?;
    check_variances(sigma2s)?;
    let t = sigma2s.len();
    let l = build_structural(alpha, t)?.l;
    let mut total = 0.0;
    for row in 0..t {
        let quad: f64 = (0..row).map(|col| l[(row, col)].powi(2) * sigma2s[col]).sum();
        total += quad / sigma2s[row];
    }
    Ok(total / t as f64)
}

fn weighted_by_dinv(x: &DMatrix<f64>, dvec: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (row, mut xr) in out.row_iter_mut().enumerate() {
        xr /= dvec[row];
    }
    out
}

fn check_factors(f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<()> {
    check_variances(dvec)?;
    if f.nrows() != dvec.len() {
        return invalid(format!("F has {} rows but D has {} entries", f.nrows(), dvec.len()));
    }
    if f.ncols() == 0 {
        return invalid("at least one factor is required");
    }
    Ok(())
}

/// `T^{-1} tr((LF)' M (LF))`, evaluated as
/// `(LF)'D^{-1}LF - (LF)'D^{-1}F (F'D^{-1}F)^{-1} F'D^{-1}LF`.
pub fn nu_t(alpha: f64, f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<f64> {
    check_factors(f, dvec)?;
    if !alpha.is_finite() {
        return invalid("alpha must be finite");
    }
    let lf = apply_l_rows(alpha, f);
    let dinv_f = weighted_by_dinv(f, dvec);
    let gram_inv = invert_gram(&(f.transpose() * &dinv_f))?;
    let cross = dinv_f.transpose() * &lf;
    let own = lf.transpose() * weighted_by_dinv(&lf, dvec);
    let nu = (own - cross.transpose() * gram_inv * cross).trace() / dvec.len() as f64;
    // M is positive semidefinite, so negatives are rounding
    Ok(nu.max(0.0))
}

/// `(T^{-1} F'L'D^{-1}F, T^{-1} F'L'D^{-1}LF)`, whose limits for smooth factors
/// are `(1-alpha)^{-1} int psi psi'/sigma^2` and `(1-alpha)^{-2} int psi psi'/sigma^2`.
pub fn lagged_factor_traces(
    alpha: f64,
    f: &DMatrix<f64>,
    dvec: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_factors(f, dvec)?;
    let t = dvec.len() as f64;
    let lf = apply_l_rows(alpha, f);
    let dinv_f = weighted_by_dinv(f, dvec);
    let dinv_lf = weighted_by_dinv(&lf, dvec);
    Ok((lf.transpose() * dinv_f / t, lf.transpose() * dinv_lf / t))
}

/// `atilde^2 (gamma + nu) + sum_s sigma_s^{-2} ftilde_s' ftilde_s`
pub fn h_norm_sq(atilde: f64, ftilde: &DMatrix<f64>, gamma: f64, nu: f64, sigma2s: &DVector<f64>) -> Result<f64> {
    if ftilde.nrows() != sigma2s.len() {
        return invalid("ftilde and variances have different lengths");
    }
    if sigma2s.iter().any(|v| !(*v > 0.0)) {
        return invalid("variances must be positive");
    }
    let factor_part: f64 = ftilde
        .row_iter()
        .zip(sigma2s.iter())
        .map(|(row, s)| row.norm_squared() / s)
        .sum();
    Ok(atilde * atilde * (gamma + nu) + factor_part)
}

/// Efficiency bounds at one parameter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub gamma_t: f64,
    pub nu_t: f64,
    /// `1 / gamma_T`, the bound for bounded-average factor perturbations.
    pub bound_alpha_ellinf: f64,
    /// `1 / (gamma_T + nu_T)`, the bound for square-summable factor perturbations.
    pub bound_alpha_ell2: f64,
    /// Per-period bound `sigma_t^2` for `sqrt(N)(fhat_t - f_t)`, per coordinate.
    pub factor_bounds: Vec<f64>,
}

impl EfficiencyReport {
    pub fn compute(alpha: f64, f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<Self> {
        let gamma_t = gamma_t_closed(alpha, dvec)?;
        let nu = nu_t(alpha, f, dvec)?;
        Ok(Self {
            gamma_t,
            nu_t: nu,
            bound_alpha_ellinf: 1.0 / gamma_t,
            bound_alpha_ell2: 1.0 / (gamma_t + nu),
            factor_bounds: dvec.iter().copied().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::structural::projection_m;

    fn ones(t: usize) -> DVector<f64> {
        DVector::from_element(t, 1.0)
    }

    #[test]
    fn gamma_white_noise() {
        assert_abs_diff_eq!(gamma_t_closed(0.0, &ones(10)).unwrap(), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(gamma_t_trace(0.0, &ones(10)).unwrap(), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn gamma_homoskedastic_limit() {
        let g = gamma_t_closed(0.5, &ones(500)).unwrap();
        assert!((g - 4.0 / 3.0).abs() < 0.01 * 4.0 / 3.0);
    }

    #[test]
    fn gamma_hand_evaluated() {
        let d = DVector::from_vec(vec![1.0, 2.0, 1.0]);
        let expect = (0.5 + 2.25) / 3.0;
        assert_abs_diff_eq!(gamma_t_closed(0.5, &d).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(gamma_t_trace(0.5, &d).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn gamma_two_periods() {
        let d = DVector::from_vec(vec![3.0, 1.5]);
        assert_abs_diff_eq!(gamma_t_trace(0.7, &d).unwrap(), 3.0 / (2.0 * 1.5), epsilon = 1e-15);
    }

    #[test]
    fn gamma_rejects_bad_input() {
        assert!(gamma_t_closed(1.0, &ones(5)).is_err());
        assert!(gamma_t_closed(0.5, &DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(gamma_t_trace(0.5, &ones(1)).is_err());
    }

    #[test]
    fn gamma_error_decays_like_inverse_t() {
        let target = 4.0 / 3.0;
        let scaled: Vec<f64> = [50, 100, 200, 400]
            .iter()
            .map(|&t| (gamma_t_closed(0.5, &ones(t)).unwrap() - target).abs() * t as f64)
            .collect();
        for w in scaled.windows(2) {
            assert!((w[1] / w[0] - 1.0).abs() < 0.05, "{scaled:?}");
        }
    }

    #[test]
    fn nu_vanishes_for_last_period_factor() {
        let mut f = DMatrix::zeros(6, 1);
        f[(5, 0)] = 1.0;
        assert_eq!(nu_t(0.5, &f, &ones(6)).unwrap(), 0.0);
    }

    #[test]
    fn nu_matches_dense_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let t = 50;
        let f = DMatrix::from_fn(t, 2, |_, _| rng.random_range(-2.0..2.0));
        let d = DVector::from_fn(t, |_, _| rng.random_range(0.5..2.0));
        let l = build_structural(0.6, t).unwrap().l;
        let m = projection_m(&f, &d).unwrap();
        let lf = &l * &f;
        let dense = (lf.transpose() * m * &lf).trace() / t as f64;
        let fast = nu_t(0.6, &f, &d).unwrap();
        assert!((dense - fast).abs() < 1e-10 * dense.max(1.0), "{dense} vs {fast}");
    }

    #[test]
    fn nu_rejects_rank_deficient_factors() {
        assert!(nu_t(0.5, &DMatrix::zeros(5, 1), &ones(5)).is_err());
    }

    #[test]
    fn nu_shrinks_for_smooth_factors() {
        let nu = |t: usize| {
            let f = DMatrix::from_fn(t, 1, |s, _| 1.0 + (s + 1) as f64 / t as f64);
            nu_t(0.5, &f, &ones(t)).unwrap()
        };
        assert!(nu(400) < nu(100));
        assert!(nu(1600) < 0.01);
    }

    #[test]
    fn lagged_traces_approach_integrals() {
        let t = 2000;
        let f = DMatrix::from_fn(t, 1, |s, _| 1.0 + (s + 1) as f64 / t as f64);
        let (cross, lagged) = lagged_factor_traces(0.5, &f, &ones(t)).unwrap();
        let integral = 7.0 / 3.0;
        assert!((cross[(0, 0)] / (2.0 * integral) - 1.0).abs() < 0.02);
        assert!((lagged[(0, 0)] / (4.0 * integral) - 1.0).abs() < 0.02);
    }

    #[test]
    fn h_norm_examples() {
        let d = ones(5);
        assert_eq!(h_norm_sq(0.0, &DMatrix::zeros(5, 1), 1.3, 0.2, &d).unwrap(), 0.0);
        assert_abs_diff_eq!(h_norm_sq(1.0, &DMatrix::zeros(5, 1), 1.0, 1.0 / 3.0, &d).unwrap(), 4.0 / 3.0);
        let mut ft = DMatrix::zeros(5, 1);
        ft[(2, 0)] = 2.0;
        let d2 = DVector::from_vec(vec![1.0, 1.0, 4.0, 1.0, 1.0]);
        assert_abs_diff_eq!(h_norm_sq(0.0, &ft, 1.0, 0.0, &d2).unwrap(), 1.0);
    }

    #[test]
    fn report_orders_bounds() {
        let f = DMatrix::from_fn(20, 1, |s, _| ((s * 7 % 5) as f64) - 1.5);
        let rep = EfficiencyReport::compute(0.4, &f, &ones(20)).unwrap();
        assert!(rep.bound_alpha_ell2 <= rep.bound_alpha_ellinf);
        assert!(rep.nu_t > 0.0);
        assert_eq!(rep.factor_bounds.len(), 20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn closed_and_trace_agree(alpha in -0.99f64..0.99, t in 2usize..100, seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DVector::from_fn(t, |_, _| rng.random_range(0.1..10.0));
            let a = gamma_t_closed(alpha, &d).unwrap();
            let b = gamma_t_trace(alpha, &d).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn nu_nonnegative(alpha in -0.95f64..0.95, seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
            let d = DVector::from_fn(12, |_, _| rng.random_range(0.2..3.0));
            prop_assert!(nu_t(alpha, &f, &d).unwrap() >= 0.0);
        }
    }
}
