//! Gaussian quasi log-likelihood of the system `B y_i = delta + F lambda_i + eps_i`.
//!
//! The full form keeps `delta`; the concentrated form profiles it out through
//! the cross-section mean, so the data enter only through `ybar` and the
//! centered second-moment matrix `S = N^{-1} sum_i (y_i - ybar)(y_i - ybar)'`:
//!
//! ```text
//! l(alpha, F, D) = -(N/2) [ log|FF' + D| + tr((FF' + D)^{-1} B S B') ]
//! ```
//!
//! Scores are taken with respect to `(alpha, vec(F), log sigma_t^2)`, with
//! `vec` stacking columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PanelError, Result};
use crate::linalg::{apply_b_rows, apply_j_rows, b_sandwich, sorted_symmetric_eigen};
use crate::structural::{factorize_covariance, invert_gram, CovarianceFactorization};

/// Balanced panel of outcomes, one row per individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    y: DMatrix<f64>,
}

impl PanelData {
    /// Accepts any finite `N x T` array with `N >= 1` and `T >= 2`. Estimation
    /// imposes stricter dimension checks of its own.
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() < 1 {
            return invalid("panel has no individuals");
        }
        if y.ncols() < 2 {
            return invalid(format!("panel length T = {} < 2", y.ncols()));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            let (i, t) = (pos % y.nrows(), pos / y.nrows());
            return invalid(format!("non-finite outcome at individual {}, period {}", i + 1, t + 1));
        }
        Ok(Self { y })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != t) {
            return invalid(format!("row {} has {} periods, expected {t}", i + 1, r.len()));
        }
        Self::new(DMatrix::from_fn(n, t, |i, j| rows[i][j]))
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t(&self) -> usize {
        self.y.ncols()
    }

    pub fn moments(&self) -> PanelMoments {
        PanelMoments::from_data(self)
    }
}

/// Parameter point `(alpha, delta, F, D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub delta: DVector<f64>,
    pub f: DMatrix<f64>,
    pub dvec: DVector<f64>,
    /// Set once `F'D^{-1}F` is diagonal with nonincreasing entries and column signs fixed.
    pub normalized: bool,
}

impl ModelParams {
    pub fn new(alpha: f64, delta: DVector<f64>, f: DMatrix<f64>, dvec: DVector<f64>) -> Result<Self> {
        let t = dvec.len();
        if delta.len() != t || f.nrows() != t {
            return invalid(format!(
                "inconsistent lengths: delta {}, F rows {}, D {}",
                delta.len(),
                f.nrows(),
                t
            ));
        }
        if !alpha.is_finite() || delta.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return invalid("parameters must be finite");
        }
        if dvec.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return invalid("variances must be positive");
        }
        Ok(Self {
            alpha,
            delta,
            f,
            dvec,
            normalized: false,
        })
    }

    pub fn t(&self) -> usize {
        self.dvec.len()
    }

    pub fn r(&self) -> usize {
        self.f.ncols()
    }
}

/// Cross-section mean and centered second moments of a panel.
#[derive(Debug, Clone)]
pub struct PanelMoments {
    pub n: usize,
    pub ybar: DVector<f64>,
    /// `N^{-1} sum_i (y_i - ybar)(y_i - ybar)'`
    pub s: DMatrix<f64>,
}

impl PanelMoments {
    pub fn from_data(data: &PanelData) -> Self {
        let y = data.y();
        let n = y.nrows();
        let ybar = y.row_mean().transpose();
        let mut centered = y.clone();
        for mut row in centered.row_iter_mut() {
            row -= ybar.transpose();
        }
        let s = centered.transpose() * &centered / n as f64;
        Self { n, ybar, s }
    }

    pub fn t(&self) -> usize {
        self.ybar.len()
    }

    /// `B(alpha) S B(alpha)'`
    pub fn b_cov(&self, alpha: f64) -> DMatrix<f64> {
        b_sandwich(alpha, &self.s)
    }

    pub fn loglik(&self, alpha: f64, f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<f64> {
        let fact = factorize_covariance(f, dvec)?;
        Ok(self.loglik_with(alpha, &fact))
    }

    pub(crate) fn loglik_with(&self, alpha: f64, fact: &CovarianceFactorization) -> f64 {
        let w = self.b_cov(alpha);
        -0.5 * self.n as f64 * (fact.logdet + fact.trace_inv_times(&w))
    }

    pub fn score(&self, alpha: f64, f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<Score> {
        let fact = factorize_covariance(f, dvec)?;
        Ok(self.score_with(alpha, &fact))
    }

    pub(crate) fn score_with(&self, alpha: f64, fact: &CovarianceFactorization) -> Score {
        let n = self.n as f64;
        let t = self.t();
        let w = self.b_cov(alpha);

        // G = Sigma^-1 - Sigma^-1 W Sigma^-1 is the matrix derivative of -(2/N) l.
        let sinv_w = fact.solve(&w);
        let sinv_f = fact.solve(&fact.f);
        let g_f = &sinv_f - fact.solve(&(&w * &sinv_f));
        let grad_f = g_f * (-n);

        let mut grad_logvar = DVector::zeros(t);
        for k in 0..t {
            let quad: f64 = sinv_w.row(k).dot(&fact.inv.column(k).transpose());
            let g_kk = fact.inv[(k, k)] - quad;
            grad_logvar[k] = -0.5 * n * g_kk * fact.dvec[k];
        }

        // dl/dalpha = N tr(Sigma^-1 J S B')
        let js = apply_j_rows(&self.s);
        let jsb = apply_b_rows(alpha, &js.transpose()).transpose();
        let grad_alpha = n * fact.trace_inv_times(&jsb);

        Score {
            alpha: grad_alpha,
            f: grad_f,
            log_sigma2: grad_logvar,
        }
    }
}

/// Gradient of the concentrated log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub alpha: f64,
    pub f: DMatrix<f64>,
    pub log_sigma2: DVector<f64>,
}

impl Score {
    /// `(alpha, vec(F), log sigma^2)` stacked into one vector.
    pub fn packed(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(1 + self.f.len() + self.log_sigma2.len());
        out.push(self.alpha);
        out.extend(self.f.iter());
        out.extend(self.log_sigma2.iter());
        DVector::from_vec(out)
    }
}

pub(crate) fn pack(alpha: f64, f: &DMatrix<f64>, dvec: &DVector<f64>) -> DVector<f64> {
    let mut out = Vec::with_capacity(1 + f.len() + dvec.len());
    out.push(alpha);
    out.extend(f.iter());
    out.extend(dvec.iter().map(|v| v.ln()));
    DVector::from_vec(out)
}

pub(crate) fn unpack(theta: &DVector<f64>, t: usize, r: usize) -> (f64, DMatrix<f64>, DVector<f64>) {
    let f = DMatrix::from_column_slice(t, r, &theta.as_slice()[1..1 + t * r]);
    let dvec = DVector::from_iterator(t, theta.as_slice()[1 + t * r..].iter().map(|v| v.exp()));
    (theta[0], f, dvec)
}

fn check_dims(params: &ModelParams, data: &PanelData) -> Result<()> {
    if params.t() != data.t() {
        return invalid(format!("parameters have T = {} but data have T = {}", params.t(), data.t()));
    }
    Ok(())
}

/// `-(N/2) log|FF'+D| - 1/2 sum_i (B y_i - delta)' (FF'+D)^{-1} (B y_i - delta)`
pub fn loglik_full(params: &ModelParams, data: &PanelData) -> Result<f64> {
    check_dims(params, data)?;
    let fact = factorize_covariance(&params.f, &params.dvec)?;
    // residuals as columns: T x N
    let mut resid = apply_b_rows(params.alpha, &data.y().transpose());
    for mut col in resid.column_iter_mut() {
        col -= &params.delta;
    }
    let mut quad = 0.0;
    for (t, row) in resid.row_iter().enumerate() {
        quad += row.norm_squared() / fact.dvec[t];
    }
    if fact.r() > 0 {
        let u = fact.dinv_f.transpose() * &resid;
        let cu = &fact.small_core * &u;
        quad -= u.component_mul(&cu).sum();
    }
    Ok(-0.5 * data.n() as f64 * fact.logdet - 0.5 * quad)
}

/// Log-likelihood with `delta` profiled out; `params.delta` is ignored.
pub fn loglik_concentrated(params: &ModelParams, data: &PanelData) -> Result<f64> {
    check_dims(params, data)?;
    data.moments().loglik(params.alpha, &params.f, &params.dvec)
}

/// Closed-form score of [`loglik_concentrated`].
pub fn score_analytic(params: &ModelParams, data: &PanelData) -> Result<Score> {
    check_dims(params, data)?;
    data.moments().score(params.alpha, &params.f, &params.dvec)
}

/// Central finite differences of [`loglik_concentrated`] in the packed
/// coordinates; `step` is scaled by `max(1, |theta_k|)`.
pub fn score_numeric(params: &ModelParams, data: &PanelData, step: f64) -> Result<Score> {
    check_dims(params, data)?;
    if !(1e-7..=1e-4).contains(&step) {
        return invalid(format!("finite-difference step {step} outside [1e-7, 1e-4]"));
    }
    let moments = data.moments();
    let (t, r) = (params.t(), params.r());
    let theta = pack(params.alpha, &params.f, &params.dvec);
    let eval = |th: &DVector<f64>| -> Result<f64> {
        let (a, f, d) = unpack(th, t, r);
        let v = moments.loglik(a, &f, &d)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PanelError::Divergence("non-finite likelihood at a perturbed point".into()))
        }
    };
    let mut grad = DVector::zeros(theta.len());
    for k in 0..theta.len() {
        let h = step * theta[k].abs().max(1.0);
        let mut up = theta.clone();
        up[k] += h;
        let mut down = theta.clone();
        down[k] -= h;
        grad[k] = (eval(&up)? - eval(&down)?) / (2.0 * h);
    }
    Ok(Score {
        alpha: grad[0],
        f: DMatrix::from_column_slice(t, r, &grad.as_slice()[1..1 + t * r]),
        log_sigma2: DVector::from_column_slice(&grad.as_slice()[1 + t * r..]),
    })
}

/// Rotates `F` so that `F'D^{-1}F` is diagonal with nonincreasing entries and
/// the first nonzero entry of each column is positive. Returns the rotated
/// factors and the orthogonal rotation `R` with `F_normalized = F R`.
pub fn normalize_f(f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if f.nrows() != dvec.len() {
        return invalid("F and D have different lengths");
    }
    let mut dinv_f = f.clone();
    for (row, mut fr) in dinv_f.row_iter_mut().enumerate() {
        fr /= dvec[row];
    }
    let gram = f.transpose() * &dinv_f;
    invert_gram(&gram)?;
    let (_, mut rot) = sorted_symmetric_eigen(&gram);
    let mut fn_ = f * &rot;
    for c in 0..fn_.ncols() {
        let lead = fn_.column(c).iter().copied().find(|v| *v != 0.0).unwrap_or(0.0);
        if lead < 0.0 {
            fn_.column_mut(c).neg_mut();
            rot.column_mut(c).neg_mut();
        }
    }
    Ok((fn_, rot))
}
