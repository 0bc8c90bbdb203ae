//! Structural matrices of the simultaneous-equations form and the
//! low-rank-plus-diagonal covariance `FF' + D`.
//!
//! `B(alpha)` is unit lower-bidiagonal with `-alpha` below the diagonal, `J` is
//! the one-step shift and `L(alpha) = J B(alpha)^{-1}` has entries
//! `alpha^(t-s-1)` strictly below the diagonal. `det B = 1`, so the Jacobian
//! never enters the likelihood.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, PanelError, Result};
use crate::linalg::{frobenius_rel_err, spd_condition, sorted_symmetric_eigen};

/// Smallest admissible idiosyncratic variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Condition number of `I_r + F'D^{-1}F` above which factorization is refused.
pub const MAX_CORE_CONDITION: f64 = 1e12;

/// Dense `B`, `J`, `L` for one `(alpha, T)`.
#[derive(Debug, Clone)]
pub struct StructuralSet {
    pub alpha: f64,
    pub t: usize,
    pub b: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

pub fn build_structural(alpha: f64, t: usize) -> Result<StructuralSet> {
    if t < 2 {
        return invalid(format!("panel length T = {t} < 2"));
    }
    if !alpha.is_finite() {
        return invalid("alpha must be finite");
    }
    let mut b = DMatrix::identity(t, t);
    let mut j = DMatrix::zeros(t, t);
    let mut l = DMatrix::zeros(t, t);
    for row in 1..t {
        b[(row, row - 1)] = -alpha;
        j[(row, row - 1)] = 1.0;
        // walk left from the subdiagonal so powers are built by repeated products
        let mut p = 1.0;
        for col in (0..row).rev() {
            l[(row, col)] = p;
            p *= alpha;
        }
    }
    Ok(StructuralSet { alpha, t, b, j, l })
}

/// Woodbury factorization of `Sigma = F F' + D` with `D = diag(dvec)`.
#[derive(Debug, Clone)]
pub struct CovarianceFactorization {
    pub f: DMatrix<f64>,
    pub dvec: DVector<f64>,
    /// `log |F F' + D|`
    pub logdet: f64,
    /// `(F F' + D)^{-1}`
    pub inv: DMatrix<f64>,
    /// `(I_r + F' D^{-1} F)^{-1}`
    pub small_core: DMatrix<f64>,
    /// `D^{-1} F`, kept for cheap products.
    pub dinv_f: DMatrix<f64>,
}

impl CovarianceFactorization {
    pub fn t(&self) -> usize {
        self.dvec.len()
    }

    pub fn r(&self) -> usize {
        self.f.ncols()
    }

    /// `Sigma^{-1} X` in `O(T r k)` without touching the dense inverse.
    pub fn solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut dx = x.clone();
        for (t, mut row) in dx.row_iter_mut().enumerate() {
            row /= self.dvec[t];
        }
        if self.r() == 0 {
            return dx;
        }
        let inner = &self.small_core * (self.dinv_f.transpose() * x);
        dx - &self.dinv_f * inner
    }

    /// `tr(Sigma^{-1} A)` for a square `A`.
    pub fn trace_inv_times(&self, a: &DMatrix<f64>) -> f64 {
        let diag_part: f64 = (0..self.t()).map(|t| a[(t, t)] / self.dvec[t]).sum();
        if self.r() == 0 {
            return diag_part;
        }
        let sandwich = self.dinv_f.transpose() * a * &self.dinv_f;
        diag_part - (&self.small_core * sandwich).trace()
    }

    /// Dense `F F' + D`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.f * self.f.transpose() + DMatrix::from_diagonal(&self.dvec)
    }
}

pub fn factorize_covariance(f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<CovarianceFactorization> {
    let t = dvec.len();
    if f.nrows() != t {
        return invalid(format!("F has {} rows but D has {} entries", f.nrows(), t));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return invalid("F contains non-finite entries");
    }
    if let Some((k, v)) = dvec.iter().enumerate().find(|(_, v)| !(**v >= VARIANCE_FLOOR) || !v.is_finite()) {
        return invalid(format!("variance sigma_{}^2 = {v} is below the floor {VARIANCE_FLOOR}", k + 1));
    }
    let r = f.ncols();
    let mut dinv_f = f.clone();
    for (row, mut fr) in dinv_f.row_iter_mut().enumerate() {
        fr /= dvec[row];
    }
    let core = DMatrix::identity(r, r) + f.transpose() * &dinv_f;
    let cond = spd_condition(&core);
    if cond > MAX_CORE_CONDITION {
        return Err(PanelError::Degenerate(format!(
            "I_r + F'D^-1F is ill-conditioned (condition number {cond:.3e})"
        )));
    }
    let chol = core
        .clone()
        .cholesky()
        .ok_or_else(|| PanelError::Degenerate("I_r + F'D^-1F is not positive definite".into()))?;
    let small_core = chol.inverse();
    let logdet_core: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet = dvec.iter().map(|v| v.ln()).sum::<f64>() + logdet_core;

    let mut inv = &dinv_f * &small_core * dinv_f.transpose();
    inv.neg_mut();
    for k in 0..t {
        inv[(k, k)] += 1.0 / dvec[k];
    }

    let fact = CovarianceFactorization {
        f: f.clone(),
        dvec: dvec.clone(),
        logdet,
        inv,
        small_core,
        dinv_f,
    };
    #[cfg(debug_assertions)]
    dense_self_check(&fact);
    Ok(fact)
}

#[cfg(debug_assertions)]
fn dense_self_check(fact: &CovarianceFactorization) {
    if fact.t() > 16 {
        return;
    }
    let sigma = fact.covariance();
    if let Some(dense) = sigma.clone().try_inverse() {
        let err = frobenius_rel_err(&fact.inv, &dense);
        if err > 1e-8 {
            log::warn!("Woodbury inverse deviates from dense inverse (relative error {err:.2e})");
        }
    }
}

/// `M = D^{-1} - D^{-1}F (F'D^{-1}F)^{-1} F'D^{-1}`, the `D`-weighted projection
/// orthogonal to the columns of `F`.
pub fn projection_m(f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<DMatrix<f64>> {
    let t = dvec.len();
    if f.nrows() != t {
        return invalid(format!("F has {} rows but D has {} entries", f.nrows(), t));
    }
    if dvec.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return invalid("variances must be positive and finite");
    }
    let mut dinv_f = f.clone();
    for (row, mut fr) in dinv_f.row_iter_mut().enumerate() {
        fr /= dvec[row];
    }
    let gram = f.transpose() * &dinv_f;
    let gram_inv = invert_gram(&gram)?;
    let mut m = &dinv_f * gram_inv * dinv_f.transpose();
    m.neg_mut();
    for k in 0..t {
        m[(k, k)] += 1.0 / dvec[k];
    }
    Ok(m)
}

/// Inverse of `F'D^{-1}F`, refusing rank deficiency.
pub(crate) fn invert_gram(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = gram.nrows();
    if r == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (vals, _) = sorted_symmetric_eigen(gram);
    let max = vals[0];
    let min = vals[r - 1];
    if !(max > 0.0) || min <= max * 1e-12 {
        return Err(PanelError::Degenerate(
            "F'D^-1F is singular: factors are rank deficient".into(),
        ));
    }
    gram.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| PanelError::Degenerate("F'D^-1F is not positive definite".into()))
}
