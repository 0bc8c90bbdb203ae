//! QMLE of `(alpha, F, D)` with `delta` profiled out, plug-in standard errors,
//! and a least-squares fixed-effects comparator.
//!
//! The optimizer runs in two stages. Stage one alternates a generalized least
//! squares update for `alpha` with EM steps of factor analysis on
//! `W(alpha) = B S B'`; each sweep cannot lower the likelihood. Stage two
//! polishes all parameters jointly by BFGS on `(alpha, vec F, log sigma^2)`
//! with the analytic score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::efficiency::gamma_recursion;
use crate::error::{invalid, PanelError, Result};
use crate::likelihood::{normalize_f, pack, unpack, ModelParams, PanelData, PanelMoments};
use crate::linalg::{apply_b_rows, apply_j_rows, sorted_symmetric_eigen};
use crate::structural::{factorize_covariance, VARIANCE_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    /// Cap on alternating GLS/EM sweeps before the joint polish.
    pub max_sweeps: usize,
    /// Relative likelihood change that ends the sweeps early.
    pub sweep_tol: f64,
    /// Cap on BFGS iterations.
    pub max_iter: usize,
    /// Relative likelihood change required for convergence.
    pub rel_tol: f64,
    /// Score sup-norm tolerance, relative to `1 + |loglik|`.
    pub grad_tol: f64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            sweep_tol: 1e-8,
            max_iter: 2000,
            rel_tol: 1e-10,
            grad_tol: 1e-6,
        }
    }
}

impl EstimationOptions {
    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.grad_tol > 0.0 && self.sweep_tol > 0.0) {
            return invalid("tolerances must be positive");
        }
        if self.max_iter == 0 {
            return invalid("max_iter must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Normalized estimates; `delta = B(alpha) ybar`.
    pub params: ModelParams,
    pub loglik: f64,
    /// Likelihood at the starting values.
    pub init_loglik: f64,
    pub sweeps: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm of the score at the estimate.
    pub grad_norm: f64,
    pub se_alpha: f64,
    pub n: usize,
}

/// Rejects panels too small to identify `r` factors with free variances.
pub fn check_identifiable(n: usize, t: usize, r: usize) -> Result<()> {
    if r == 0 {
        return invalid("number of factors r must be at least 1");
    }
    if t < 4 {
        return invalid(format!("panel length T = {t} < 4"));
    }
    if n <= t {
        return invalid(format!("need N > T for a nonsingular sample covariance, got N = {n}, T = {t}"));
    }
    // degrees of freedom of T x T covariance minus those of FF' + D
    let (ti, ri) = (t as i64, r as i64);
    if (ti - ri) * (ti - ri) - (ti + ri) < 2 {
        return invalid(format!("r = {r} factors exceeds the identifiable maximum for T = {t}"));
    }
    Ok(())
}

/// Starting values: Anderson-Hsiao IV for `alpha`, principal components of
/// `B(alpha) S B'` for `(F, D)`.
pub fn init_params(data: &PanelData, r: usize) -> Result<ModelParams> {
    if r == 0 {
        return invalid("number of factors r must be at least 1");
    }
    if data.t() < 3 {
        return invalid("initialization needs at least three periods");
    }
    let m = data.moments();
    let alpha = initial_alpha(data, &m)?;
    let w = m.b_cov(alpha);
    let (f, dvec) = principal_factors(&w, r)?;
    let delta = apply_b_rows(alpha, &DMatrix::from_column_slice(m.t(), 1, m.ybar.as_slice())).column(0).into_owned();
    ModelParams::new(alpha, delta, f, dvec)
}

fn initial_alpha(data: &PanelData, m: &PanelMoments) -> Result<f64> {
    let y = data.y();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for i in 0..data.n() {
        let z = |t: usize| y[(i, t)] - m.ybar[t];
        let (z1, dz2, dz3) = (z(0), z(1) - z(0), z(2) - z(1));
        num += z1 * dz3;
        den += z1 * dz2;
        scale += (z1 * z1).max(dz2 * dz2);
    }
    let alpha = if den.abs() > 1e-8 * scale && scale > 0.0 {
        num / den
    } else {
        log::debug!("IV moment is degenerate; using pooled least squares for alpha");
        let lagged = apply_j_rows(&m.s);
        let den = (1..m.t()).map(|t| m.s[(t - 1, t - 1)]).sum::<f64>();
        if !(den > 0.0) {
            return Err(PanelError::Degenerate("outcomes have zero cross-sectional variance".into()));
        }
        lagged.diagonal().sum() / den
    };
    if !alpha.is_finite() {
        return Err(PanelError::Degenerate("initial alpha is not finite".into()));
    }
    Ok(alpha.clamp(-0.99, 0.99))
}

fn principal_factors(w: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let t = w.nrows();
    let (vals, vecs) = sorted_symmetric_eigen(w);
    let mean_diag = w.trace() / t as f64;
    if !(mean_diag > 0.0) {
        return Err(PanelError::Degenerate("outcomes have zero cross-sectional variance".into()));
    }
    let noise = (vals.rows(r, t - r).sum() / (t - r) as f64).max(0.0);
    let mut f = DMatrix::zeros(t, r);
    for k in 0..r {
        let scale = (vals[k] - noise).max(1e-4 * mean_diag).sqrt();
        f.set_column(k, &(vecs.column(k) * scale));
    }
    let floor = (1e-3 * mean_diag).max(VARIANCE_FLOOR);
    let ff = &f * f.transpose();
    let dvec = DVector::from_fn(t, |k, _| (w[(k, k)] - ff[(k, k)]).max(floor));
    Ok((f, dvec))
}

/// `alpha` maximizing the likelihood for fixed `Sigma`:
/// `tr(Sigma^{-1} J S) / tr(Sigma^{-1} J S J')`.
fn gls_alpha(m: &PanelMoments, f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<f64> {
    let fact = factorize_covariance(f, dvec)?;
    let js = apply_j_rows(&m.s);
    let num = fact.trace_inv_times(&js);
    let den = fact.trace_inv_times(&apply_j_rows(&js.transpose()).transpose());
    if !(den > 0.0) {
        return Err(PanelError::Degenerate("lagged outcomes have zero variance".into()));
    }
    Ok(num / den)
}

/// One EM step of factor analysis on the covariance `w`.
fn em_step(w: &DMatrix<f64>, f: &DMatrix<f64>, dvec: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let r = f.ncols();
    let fact = factorize_covariance(f, dvec)?;
    let beta = fact.solve(f).transpose();
    let beta_w = &beta * w;
    let ezz = DMatrix::identity(r, r) - &beta * f + &beta_w * beta.transpose();
    let ezz_inv = ezz
        .cholesky()
        .ok_or_else(|| PanelError::Degenerate("factor second moments are singular".into()))?
        .inverse();
    let f_new = beta_w.transpose() * ezz_inv;
    let fb = &f_new * &beta_w;
    let d_new = DVector::from_fn(w.nrows(), |k, _| (w[(k, k)] - fb[(k, k)]).max(VARIANCE_FLOOR));
    Ok((f_new, d_new))
}

fn check_finite_alpha(alpha: f64, loglik: f64) -> Result<()> {
    if !loglik.is_finite() {
        return Err(PanelError::Divergence("log-likelihood is not finite".into()));
    }
    if !(alpha.abs() <= 1e3) {
        return Err(PanelError::Divergence(format!("alpha ran away to {alpha}")));
    }
    Ok(())
}

struct Polish {
    theta: DVector<f64>,
    loglik: f64,
    iterations: usize,
    converged: bool,
    grad_norm: f64,
}

/// BFGS with Armijo backtracking on `-l / (NT)`.
fn polish(m: &PanelMoments, start: &ModelParams, opts: &EstimationOptions) -> Result<Polish> {
    let (t, r) = (start.t(), start.r());
    let scale = (m.n * t) as f64;
    let objective = |theta: &DVector<f64>| -> (f64, Option<DVector<f64>>) {
        let (alpha, f, dvec) = unpack(theta, t, r);
        if dvec.iter().any(|v| !(*v >= VARIANCE_FLOOR) || !v.is_finite()) {
            return (f64::INFINITY, None);
        }
        match factorize_covariance(&f, &dvec) {
            Ok(fact) => {
                let l = m.loglik_with(alpha, &fact);
                if !l.is_finite() {
                    return (f64::INFINITY, None);
                }
                let g = m.score_with(alpha, &fact).packed();
                (-l / scale, Some(-g / scale))
            }
            Err(_) => (f64::INFINITY, None),
        }
    };

    let mut x = pack(start.alpha, &start.f, &start.dvec);
    let (mut fx, g0) = objective(&x);
    let mut g = g0.ok_or_else(|| PanelError::Degenerate("starting point has a degenerate covariance".into()))?;
    let dim = x.len();
    let mut h = DMatrix::identity(dim, dim);
    let mut h_is_identity = true;
    let mut last_rel = f64::INFINITY;
    let grad_ok = |fx: f64, g: &DVector<f64>| g.amax() * scale <= opts.grad_tol * (1.0 + fx.abs() * scale);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        if last_rel < opts.rel_tol && grad_ok(fx, &g) {
            converged = true;
            break;
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(dim, dim);
            h_is_identity = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &p * step;
            let (fc, gc) = objective(&cand);
            if fc <= fx + 1e-4 * step * slope {
                if let Some(gc) = gc {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if !h_is_identity {
                h = DMatrix::identity(dim, dim);
                h_is_identity = true;
                continue;
            }
            // no further ascent possible in floating point
            converged = grad_ok(fx, &g);
            break;
        };
        iterations += 1;
        last_rel = (f_new - fx).abs() / fx.abs().max(1.0 / scale);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if h_is_identity {
                h *= sy / y.norm_squared();
                h_is_identity = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s (Hy)' + (Hy) s') + rho (1 + rho y'Hy) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        check_finite_alpha(x[0], -fx * scale)?;
    }
    if !converged && last_rel < opts.rel_tol && grad_ok(fx, &g) {
        converged = true;
    }
    Ok(Polish {
        theta: x,
        loglik: -fx * scale,
        iterations,
        converged,
        grad_norm: g.amax() * scale,
    })
}

/// Quasi-maximum likelihood estimate with `delta` profiled out.
///
/// A fit that hits the iteration cap is returned with `converged = false`.
pub fn estimate_qmle(data: &PanelData, r: usize, opts: &EstimationOptions) -> Result<FitResult> {
    opts.validate()?;
    check_identifiable(data.n(), data.t(), r)?;
    let m = data.moments();
    let init = init_params(data, r)?;
    let init_loglik = m.loglik(init.alpha, &init.f, &init.dvec)?;
    check_finite_alpha(init.alpha, init_loglik)?;

    let (mut alpha, mut f, mut dvec) = (init.alpha, init.f.clone(), init.dvec.clone());
    let mut loglik = init_loglik;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        alpha = gls_alpha(&m, &f, &dvec)?;
        let (f_new, d_new) = em_step(&m.b_cov(alpha), &f, &dvec)?;
        f = f_new;
        dvec = d_new;
        let next = m.loglik(alpha, &f, &dvec)?;
        check_finite_alpha(alpha, next)?;
        let rel = (next - loglik).abs() / loglik.abs().max(1.0);
        loglik = next;
        if rel < opts.sweep_tol {
            break;
        }
    }

    let start = ModelParams::new(alpha, init.delta.clone(), f, dvec)?;
    let polished = polish(&m, &start, opts)?;
    let (alpha, f, dvec) = unpack(&polished.theta, data.t(), r);
    check_finite_alpha(alpha, polished.loglik)?;
    if alpha.abs() >= 1.0 {
        log::warn!("estimated alpha = {alpha:.4} lies outside the stationary region");
    }
    if !polished.converged {
        log::warn!(
            "QMLE stopped after {} iterations without meeting tolerances (score sup-norm {:.3e})",
            polished.iterations,
            polished.grad_norm
        );
    }
    let (f, _) = normalize_f(&f, &dvec)?;
    let ybar = DMatrix::from_column_slice(data.t(), 1, m.ybar.as_slice());
    let delta = apply_b_rows(alpha, &ybar).column(0).into_owned();
    let mut params = ModelParams::new(alpha, delta, f, dvec)?;
    params.normalized = true;
    let se_alpha = se_from(alpha, &params.dvec, data.n());
    Ok(FitResult {
        params,
        loglik: polished.loglik,
        init_loglik,
        sweeps,
        iterations: polished.iterations,
        converged: polished.converged,
        grad_norm: polished.grad_norm,
        se_alpha,
        n: data.n(),
    })
}

fn se_from(alpha: f64, dvec: &DVector<f64>, n: usize) -> f64 {
    let nt = (n * dvec.len()) as f64;
    (nt * gamma_recursion(alpha, dvec)).powf(-0.5)
}

/// `(N T gamma_T(alpha, D))^{-1/2}` at the estimates.
pub fn standard_error_alpha(fit: &FitResult, data: &PanelData) -> Result<f64> {
    if fit.params.t() != data.t() {
        return invalid("fit and data have different panel lengths");
    }
    Ok(se_from(fit.params.alpha, &fit.params.dvec, data.n()))
}

/// Per-period standard error `sigma_t / sqrt(N)`, common to every factor coordinate.
pub fn estimate_factors_se(fit: &FitResult) -> Vec<f64> {
    let n = fit.n as f64;
    fit.params.dvec.iter().map(|s| (s / n).sqrt()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FEFitResult {
    pub alpha: f64,
    /// `N x r` loadings.
    pub lambda: DMatrix<f64>,
    /// `T x r` factors; the first row is zero because period one is not fitted.
    pub f: DMatrix<f64>,
    /// Time effects; `delta_1 = 0` for the same reason.
    pub delta: DVector<f64>,
    pub sigma2: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares fixed-effects fit with homoskedastic errors: alternates
/// `(alpha, delta)` given the common component with a rank-`r` principal
/// components fit of the remaining residuals. Only periods `2..T` enter.
pub fn estimate_fixed_effects(data: &PanelData, r: usize, opts: &EstimationOptions) -> Result<FEFitResult> {
    opts.validate()?;
    let (n, t) = (data.n(), data.t());
    if r == 0 {
        return invalid("number of factors r must be at least 1");
    }
    if t < 3 {
        return invalid(format!("panel length T = {t} < 3"));
    }
    if r >= t - 1 || r >= n {
        return invalid(format!("r = {r} leaves no residual degrees of freedom"));
    }
    let y = data.y();
    let cur = y.columns(1, t - 1).into_owned();
    let lag = y.columns(0, t - 1).into_owned();
    let lag_c = column_demean(&lag);
    let lag_ss = lag_c.norm_squared();
    let scale = cur.norm_squared().max(f64::MIN_POSITIVE);
    if !(lag_ss > 0.0) {
        return Err(PanelError::Degenerate("lagged outcomes have zero cross-sectional variance".into()));
    }

    let ls_step = |common: &DMatrix<f64>| -> (f64, DVector<f64>) {
        let target = column_demean(&(&cur - common));
        let alpha = lag_c.dot(&target) / lag_ss;
        let resid = &cur - &lag * alpha - common;
        (alpha, resid.row_mean().transpose())
    };
    let pc_step = |alpha: f64, delta: &DVector<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
        let mut z = &cur - &lag * alpha;
        for mut row in z.row_iter_mut() {
            row -= delta.transpose();
        }
        let (_, vecs) = sorted_symmetric_eigen(&(z.transpose() * &z));
        let f = vecs.columns(0, r).into_owned();
        (&z * &f, f)
    };
    let objective = |alpha: f64, delta: &DVector<f64>, lam: &DMatrix<f64>, f: &DMatrix<f64>| -> f64 {
        let mut e = &cur - &lag * alpha - lam * f.transpose();
        for mut row in e.row_iter_mut() {
            row -= delta.transpose();
        }
        e.norm_squared()
    };

    let mut alpha = profile_grid_alpha(&cur, &lag, r);
    let mut delta = column_mean(&(&cur - &lag * alpha));
    let (mut lam, mut f) = pc_step(alpha, &delta);
    let mut obj = objective(alpha, &delta, &lam, &f);
    let mut iterations = 0;
    let mut converged = false;
    let max_iter = opts.max_iter.max(5000);
    while iterations < max_iter {
        iterations += 1;
        let (a_new, d_new) = ls_step(&(&lam * f.transpose()));
        let (l_new, f_new) = pc_step(a_new, &d_new);
        let next = objective(a_new, &d_new, &l_new, &f_new);
        if next > obj * (1.0 + 1e-10) + 1e-14 * scale {
            return Err(PanelError::NonMonotone(format!(
                "fixed-effects objective rose from {obj:.17e} to {next:.17e} at iteration {iterations}"
            )));
        }
        let rel = (obj - next) / obj.max(f64::MIN_POSITIVE);
        alpha = a_new;
        delta = d_new;
        lam = l_new;
        f = f_new;
        obj = next;
        if rel < opts.rel_tol || obj <= 1e-24 * scale {
            converged = true;
            break;
        }
    }

    let mut f_full = DMatrix::zeros(t, r);
    f_full.rows_mut(1, t - 1).copy_from(&f);
    let mut delta_full = DVector::zeros(t);
    delta_full.rows_mut(1, t - 1).copy_from(&delta);
    Ok(FEFitResult {
        alpha,
        lambda: lam,
        f: f_full,
        delta: delta_full,
        sigma2: obj / (n * (t - 1)) as f64,
        objective: obj,
        iterations,
        converged,
    })
}

/// Grid minimizer over `alpha` of the objective with `(delta, Lambda, F)`
/// concentrated out: the sum of all but the `r` largest eigenvalues of the
/// centered cross-product of `cur - alpha lag`, which is quadratic in `alpha`.
fn profile_grid_alpha(cur: &DMatrix<f64>, lag: &DMatrix<f64>, r: usize) -> f64 {
    let (c, l) = (column_demean(cur), column_demean(lag));
    let cc = c.transpose() * &c;
    let cl = c.transpose() * &l;
    let ll = l.transpose() * &l;
    let cross = &cl + cl.transpose();
    let trailing = |a: f64| {
        let (vals, _) = sorted_symmetric_eigen(&(&cc - &cross * a + &ll * (a * a)));
        vals.rows(r, vals.len() - r).sum()
    };
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=250 {
        let a = -1.0 + 0.01 * k as f64;
        let v = trailing(a);
        if v < best.0 {
            best = (v, a);
        }
    }
    best.1
}

fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    x.row_mean().transpose()
}

fn column_demean(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    out
}
