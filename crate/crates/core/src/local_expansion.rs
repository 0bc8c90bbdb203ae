//! Local likelihood ratios and their quadratic expansion.
//!
//! A perturbation moves `alpha` by `atilde / sqrt(NT)` and the factors by
//! `Ftilde / sqrt(NT)` (bounded-average and smooth modes) or `Ftilde / sqrt(N)`
//! (square-summable mode), keeping `D` at its true value. The exact change in the
//! concentrated log-likelihood is compared with `Delta - Var(Delta) / 2`, where
//! `Delta` is a linear statistic in the true loadings and shocks. Those are only
//! known for simulated panels, so everything here takes a [`TruthRecord`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::efficiency::{gamma_recursion, nu_t};
use crate::error::{invalid, PanelError, Result};
use crate::likelihood::{ModelParams, PanelData};
use crate::linalg::{apply_b_rows, apply_j_rows, apply_l_rows};
use crate::simulation::{mean, sample_var, simulate_replication, DgpConfig, SeriesSpec, TruthRecord};
use crate::structural::projection_m;

/// D-weighted orthogonality tolerance for smooth perturbations at `T >= 200`;
/// shorter panels get `SMOOTH_ORTHOGONALITY_TOL * 200 / T`.
pub const SMOOTH_ORTHOGONALITY_TOL: f64 = 1e-2;

/// Minimum replications for the score-orthogonality diagnostics.
pub const MIN_ORTHOGONALITY_REPS: usize = 1000;

/// How the factor perturbation is scaled and which expansion applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// `f_t + ftilde_t / sqrt(NT)` with `T^{-1} sum ||ftilde_t||^2` bounded.
    #[serde(rename = "ell_infinity")]
    EllInfinity,
    /// As `EllInfinity`, with `ftilde_t = psi_tilde(t/T)` D-orthogonal to the factors.
    #[serde(rename = "smooth_C")]
    SmoothC,
    /// `f_t + ftilde_t / sqrt(N)` with `sum ||ftilde_t||^2` bounded.
    #[serde(rename = "ell_2")]
    Ell2,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::EllInfinity, Mode::SmoothC, Mode::Ell2];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::EllInfinity => "ell_infinity",
            Mode::SmoothC => "smooth_C",
            Mode::Ell2 => "ell_2",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PanelError::InvalidInput(format!("unknown mode {s:?}; expected ell_infinity, smooth_C or ell_2")))
    }
}

/// A local parameter `(atilde, Ftilde)` for one panel length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub atilde: f64,
    /// `T x r`
    pub ftilde: DMatrix<f64>,
    pub mode: Mode,
}

impl Perturbation {
    pub fn new(atilde: f64, ftilde: DMatrix<f64>, mode: Mode) -> Result<Self> {
        if !atilde.is_finite() || ftilde.iter().any(|v| !v.is_finite()) {
            return invalid("perturbation must be finite");
        }
        Ok(Self { atilde, ftilde, mode })
    }

    pub fn zero(t: usize, r: usize, mode: Mode) -> Self {
        Self {
            atilde: 0.0,
            ftilde: DMatrix::zeros(t, r),
            mode,
        }
    }

    /// The size the mode bounds: `T^{-1} sum ||ftilde_t||^2`, or the plain sum for `ell_2`.
    pub fn size(&self) -> f64 {
        let total = self.ftilde.norm_squared();
        match self.mode {
            Mode::Ell2 => total,
            _ => total / self.ftilde.nrows().max(1) as f64,
        }
    }

    /// The same point of the parameter space written in the bounded-average
    /// scaling; `ell_2` factors are multiplied by `sqrt(T)`.
    pub fn as_ell_infinity(&self) -> Self {
        let scale = match self.mode {
            Mode::Ell2 => (self.ftilde.nrows() as f64).sqrt(),
            _ => 1.0,
        };
        Self {
            atilde: self.atilde,
            ftilde: &self.ftilde * scale,
            mode: Mode::EllInfinity,
        }
    }

    /// Multipliers turning `(atilde, Ftilde)` into parameter displacements.
    pub fn step_sizes(&self, n: usize, t: usize) -> (f64, f64) {
        let nt = (n * t) as f64;
        let f_step = match self.mode {
            Mode::Ell2 => 1.0 / (n as f64).sqrt(),
            _ => 1.0 / nt.sqrt(),
        };
        (1.0 / nt.sqrt(), f_step)
    }

    /// `(alpha, F)` at the perturbed point.
    pub fn apply(&self, params: &ModelParams, n: usize) -> (f64, DMatrix<f64>) {
        let (a_step, f_step) = self.step_sizes(n, params.t());
        (params.alpha + self.atilde * a_step, &params.f + &self.ftilde * f_step)
    }

    /// Checks shape against the truth and, for `smooth_C`, D-weighted
    /// orthogonality to the true factors.
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.ftilde.shape() != params.f.shape() {
            return invalid(format!(
                "Ftilde is {:?} but F is {:?}",
                self.ftilde.shape(),
                params.f.shape()
            ));
        }
        if self.mode == Mode::SmoothC {
            let t = params.t();
            let gap = weighted_inner(&self.ftilde, &params.f, &params.dvec).amax();
            let tol = SMOOTH_ORTHOGONALITY_TOL * (200.0 / t as f64).max(1.0);
            if gap > tol {
                return invalid(format!(
                    "smooth_C perturbation is not D-orthogonal to the factors: {gap:.3e} > {tol:.1e}"
                ));
            }
        }
        Ok(())
    }
}

/// `T^{-1} sum_t sigma_t^{-2} a_t b_t'`
fn weighted_inner(a: &DMatrix<f64>, b: &DMatrix<f64>, dvec: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (t, mut row) in scaled.row_iter_mut().enumerate() {
        row /= dvec[t];
    }
    scaled.transpose() * b / dvec.len() as f64
}

/// A perturbation defined by series, so it can be evaluated at any `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub atilde: f64,
    /// One series per factor.
    pub ftilde: Vec<SeriesSpec>,
    pub mode: Mode,
}

impl PerturbationSpec {
    pub fn resolve(&self, t: usize) -> Result<Perturbation> {
        let mut ftilde = DMatrix::zeros(t, self.ftilde.len());
        for (k, spec) in self.ftilde.iter().enumerate() {
            ftilde.set_column(k, &spec.evaluate(t)?);
        }
        Perturbation::new(self.atilde, ftilde, self.mode)
    }
}

/// The linear statistics of one replication, with `atilde = 1` and no factor
/// perturbation folded in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    /// `(NT)^{-1/2} sum_i (L eps_i)' D^{-1} eps_i`, the efficient score for `alpha`.
    pub alpha_efficient: f64,
    /// `(NT)^{-1/2} sum_i lambda_i' (LF)' M eps_i`
    pub alpha_projected: f64,
    /// Factor scores `v_t = N^{-1/2} sum_i lambda_i (M eps_i)_t`, one row per period.
    pub factor_scores: DMatrix<f64>,
    /// `N^{-1/2} sum_i lambda_i eps_it / sigma_t^2`, one row per period.
    pub factor_scores_dinv: DMatrix<f64>,
}

/// True-parameter quantities shared by every replication of a design.
struct Geometry {
    t: usize,
    dvec: DVector<f64>,
    m: DMatrix<f64>,
    lf: DMatrix<f64>,
    gamma: f64,
    nu: f64,
}

impl Geometry {
    fn new(params: &ModelParams) -> Result<Self> {
        let m = projection_m(&params.f, &params.dvec)?;
        let lf = apply_l_rows(params.alpha, &params.f);
        Ok(Self {
            t: params.t(),
            dvec: params.dvec.clone(),
            gamma: gamma_recursion(params.alpha, &params.dvec),
            nu: nu_t(params.alpha, &params.f, &params.dvec)?,
            m,
            lf,
        })
    }

    fn components(&self, truth: &TruthRecord) -> ScoreComponents {
        let (n, t) = (truth.eps.nrows(), self.t);
        let root_n = (n as f64).sqrt();
        let eps_t = truth.eps.transpose();
        let e_lambda = &eps_t * &truth.lambda / root_n;
        let factor_scores = &self.m * &e_lambda;
        let mut factor_scores_dinv = e_lambda;
        for (row, mut v) in factor_scores_dinv.row_iter_mut().enumerate() {
            v /= self.dvec[row];
        }
        let lagged = apply_l_rows(truth.params.alpha, &eps_t);
        let mut own = 0.0;
        for s in 0..t {
            own += lagged.row(s).dot(&eps_t.row(s)) / self.dvec[s];
        }
        let root_t = (t as f64).sqrt();
        ScoreComponents {
            alpha_efficient: own / (root_n * root_t),
            alpha_projected: self.lf.dot(&factor_scores) / root_t,
            factor_scores,
            factor_scores_dinv,
        }
    }

    fn trace_m(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a.transpose() * &self.m * b).trace() / self.t as f64
    }

    fn trace_dinv(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        weighted_inner(a, b, &self.dvec).trace()
    }

    fn variance_formula(&self, pert: &Perturbation) -> f64 {
        let a = pert.atilde;
        let ft = &pert.ftilde;
        match pert.mode {
            Mode::EllInfinity => {
                self.trace_m(ft, ft) + a * a * (self.gamma + self.nu) + 2.0 * a * self.trace_m(&self.lf, ft)
            }
            Mode::SmoothC => self.trace_dinv(ft, ft) + a * a * self.gamma,
            Mode::Ell2 => self.t as f64 * self.trace_dinv(ft, ft) + a * a * (self.gamma + self.nu),
        }
    }

    /// `E[Delta^2]` for the statistic as defined in each mode; only `ell_2`
    /// differs from the formula, by the covariance of its first and third terms.
    fn variance_exact(&self, pert: &Perturbation) -> f64 {
        let base = self.variance_formula(pert);
        match pert.mode {
            Mode::Ell2 => base + 2.0 * pert.atilde * (self.t as f64).sqrt() * self.trace_m(&self.lf, &pert.ftilde),
            _ => base,
        }
    }

    fn terms(&self, pert: &Perturbation, comp: &ScoreComponents) -> (f64, f64, f64) {
        let root_t = (self.t as f64).sqrt();
        let a = pert.atilde;
        match pert.mode {
            Mode::EllInfinity => (
                pert.ftilde.dot(&comp.factor_scores) / root_t,
                a * comp.alpha_efficient,
                a * comp.alpha_projected,
            ),
            Mode::SmoothC => (
                pert.ftilde.dot(&comp.factor_scores_dinv) / root_t,
                a * comp.alpha_efficient,
                0.0,
            ),
            Mode::Ell2 => (
                pert.ftilde.dot(&comp.factor_scores_dinv),
                a * comp.alpha_efficient,
                a * comp.alpha_projected,
            ),
        }
    }
}

/// The expansion of one local likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTerms {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// The closed-form `E[Delta^2]` of the expansion for this mode.
    pub variance_formula: f64,
    /// The exact `E[Delta^2]` of `d1 + d2 + d3` at this `T`.
    pub variance_exact: f64,
    pub lr_exact: f64,
    /// `lr_exact - (d1 + d2 + d3 - variance_formula / 2)`
    pub residual: f64,
}

impl DeltaTerms {
    pub fn delta(&self) -> f64 {
        self.d1 + self.d2 + self.d3
    }
}

/// Score statistics of one simulated panel.
pub fn score_components(truth: &TruthRecord) -> Result<ScoreComponents> {
    Ok(Geometry::new(&truth.params)?.components(truth))
}

/// Expansion terms and the exact likelihood ratio for the panel stored in `truth`.
pub fn delta_terms(pert: &Perturbation, truth: &TruthRecord) -> Result<DeltaTerms> {
    let data = truth.panel()?;
    let geometry = Geometry::new(&truth.params)?;
    delta_terms_with(&geometry, pert, truth, &data)
}

fn delta_terms_with(geometry: &Geometry, pert: &Perturbation, truth: &TruthRecord, data: &PanelData) -> Result<DeltaTerms> {
    pert.validate(&truth.params)?;
    let comp = geometry.components(truth);
    let (d1, d2, d3) = geometry.terms(pert, &comp);
    let variance_formula = geometry.variance_formula(pert);
    let lr = lr_exact(pert, truth, data)?;
    Ok(DeltaTerms {
        d1,
        d2,
        d3,
        variance_formula,
        variance_exact: geometry.variance_exact(pert),
        lr_exact: lr,
        residual: lr - (d1 + d2 + d3 - 0.5 * variance_formula),
    })
}

/// `l(theta0 + perturbation) - l(theta0)` for the concentrated likelihood with
/// `D` held at its true value.
pub fn lr_exact(pert: &Perturbation, truth: &TruthRecord, data: &PanelData) -> Result<f64> {
    let params = &truth.params;
    check_data(truth, data)?;
    pert.validate(params)?;
    let moments = data.moments();
    let (alpha, f) = pert.apply(params, data.n());
    let perturbed = moments.loglik(alpha, &f, &params.dvec)?;
    let base = moments.loglik(params.alpha, &params.f, &params.dvec)?;
    let lr = perturbed - base;
    if !lr.is_finite() {
        return Err(PanelError::Degenerate("non-finite likelihood at the perturbed point".into()));
    }
    Ok(lr)
}

fn check_data(truth: &TruthRecord, data: &PanelData) -> Result<()> {
    if data.n() != truth.eps.nrows() || data.t() != truth.params.t() {
        return invalid(format!(
            "data is {}x{} but the truth record is {}x{}",
            data.n(),
            data.t(),
            truth.eps.nrows(),
            truth.params.t()
        ));
    }
    Ok(())
}

/// The four pieces of the likelihood-ratio difference, computed with dense
/// inverses of `FF' + D` and `GG' + D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecomposition {
    /// `-N/2 (log|GG'+D| - log|FF'+D|)`
    pub logdet: f64,
    /// `-1/2 sum_i u_i' [(GG'+D)^{-1} - (FF'+D)^{-1}] u_i` with `u_i = B(y_i - ybar)`
    pub quadratic: f64,
    /// `a sum_i (J(y_i - ybar))' (GG'+D)^{-1} u_i` for the `alpha` step `a`
    pub cross: f64,
    /// `-a^2/2 sum_i (J(y_i - ybar))' (GG'+D)^{-1} J(y_i - ybar)`
    pub lag_quadratic: f64,
}

impl LrDecomposition {
    pub fn total(&self) -> f64 {
        self.logdet + self.quadratic + self.cross + self.lag_quadratic
    }
}

fn dense_inverse_logdet(sigma: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = sigma
        .cholesky()
        .ok_or_else(|| PanelError::Degenerate("covariance is not positive definite".into()))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

/// Evaluates the likelihood ratio by perturbing `B` and `FF' + D` separately.
pub fn lr_decomposition(pert: &Perturbation, truth: &TruthRecord, data: &PanelData) -> Result<LrDecomposition> {
    let params = &truth.params;
    check_data(truth, data)?;
    pert.validate(params)?;
    let n = data.n();
    let (alpha_new, g) = pert.apply(params, n);
    let step = alpha_new - params.alpha;
    let diag = DMatrix::from_diagonal(&params.dvec);
    let (inv_f, logdet_f) = dense_inverse_logdet(&params.f * params.f.transpose() + &diag)?;
    let (inv_g, logdet_g) = dense_inverse_logdet(&g * g.transpose() + &diag)?;

    let moments = data.moments();
    let mut centered_t = data.y().transpose();
    for mut col in centered_t.column_iter_mut() {
        col -= &moments.ybar;
    }
    let u = apply_b_rows(params.alpha, &centered_t);
    let lagged = apply_j_rows(&centered_t);
    let sum_quad = |a: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>| a.dot(&(w * b));
    Ok(LrDecomposition {
        logdet: -0.5 * n as f64 * (logdet_g - logdet_f),
        quadratic: -0.5 * sum_quad(&u, &(&inv_g - &inv_f), &u),
        cross: step * sum_quad(&lagged, &inv_g, &u),
        lag_quadratic: -0.5 * step * step * sum_quad(&lagged, &inv_g, &lagged),
    })
}

/// Runs `f` on replications `0..reps`, in parallel, collecting results by index.
fn per_replication<X, F>(config: &DgpConfig, reps: usize, f: F) -> Result<Vec<X>>
where
    X: Send,
    F: Fn(&PanelData, &TruthRecord) -> Result<X> + Sync,
{
    config.validate()?;
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (data, truth) = simulate_replication(config, rep)?;
            f(&data, &truth)
        })
        .collect()
}

fn design_geometry(config: &DgpConfig) -> Result<(Geometry, ModelParams)> {
    let (_, truth) = simulate_replication(config, 0)?;
    Ok((Geometry::new(&truth.params)?, truth.params))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Sample correlation; zero when either series is constant.
fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Correlations of the efficient score with the factor scores, and the
/// regression of the projected part on the factor scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub reps: usize,
    /// `corr(Delta_NT2, v_tk)` in period-major order.
    pub correlations: Vec<f64>,
    pub max_abs_correlation: f64,
    /// `1 / sqrt(reps)`
    pub noise_band: f64,
    /// `||Delta_NT3 - V beta|| / ||Delta_NT3||` for the least-squares `beta`.
    pub projection_rel_err: f64,
    pub efficient_score_variance: f64,
    pub gamma_t: f64,
}

pub fn efficient_score_orthogonality(config: &DgpConfig, reps: usize) -> Result<OrthogonalityReport> {
    if reps < MIN_ORTHOGONALITY_REPS {
        return invalid(format!("need at least {MIN_ORTHOGONALITY_REPS} replications, got {reps}"));
    }
    let (geometry, _) = design_geometry(config)?;
    let comps = per_replication(config, reps, |_, truth| Ok(geometry.components(truth)))?;
    let width = config.t * config.r;
    let scores = DMatrix::from_fn(reps, width, |rep, k| {
        let v = &comps[rep].factor_scores;
        v[(k / config.r, k % config.r)]
    });
    let efficient: Vec<f64> = comps.iter().map(|c| c.alpha_efficient).collect();
    let projected = DVector::from_iterator(reps, comps.iter().map(|c| c.alpha_projected));

    let correlations: Vec<f64> = (0..width)
        .map(|k| correlation(&efficient, scores.column(k).as_slice()))
        .collect();
    let max_abs_correlation = correlations.iter().fold(0.0f64, |m, c| m.max(c.abs()));

    let svd = scores.clone().svd(true, true);
    let beta = svd
        .solve(&projected, 1e-12)
        .map_err(|e| PanelError::Degenerate(format!("factor-score regression failed: {e}")))?;
    let fitted = &scores * beta;
    let projection_rel_err = (&projected - fitted).norm() / projected.norm().max(f64::MIN_POSITIVE);

    Ok(OrthogonalityReport {
        reps,
        correlations,
        max_abs_correlation,
        noise_band: 1.0 / (reps as f64).sqrt(),
        projection_rel_err,
        efficient_score_variance: sample_var(&efficient),
        gamma_t: geometry.gamma,
    })
}

/// Distribution of `Delta` and of the likelihood ratio over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanReport {
    pub mode: Mode,
    pub reps: usize,
    pub delta_mean: f64,
    pub delta_mean_mcse: f64,
    pub delta_variance: f64,
    /// The mode's closed-form variance; for `ell_2` this is the finite-`T` `||h||^2`.
    pub target_variance: f64,
    pub exact_variance: f64,
    /// `delta_variance / target_variance`
    pub variance_ratio: f64,
    /// Sup distance between the empirical CDF of `Delta` and `N(0, target_variance)`.
    pub ks_distance: f64,
    pub lr_mean: f64,
    pub deltas: Vec<f64>,
}

fn ks_distance(xs: &[f64], variance: f64) -> Result<f64> {
    if variance <= 0.0 {
        return Ok(if xs.iter().all(|x| x.abs() < 1e-12) { 0.0 } else { 1.0 });
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| PanelError::InvalidInput(e.to_string()))?;
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.iter().enumerate().fold(0.0f64, |acc, (k, x)| {
        let c = normal.cdf(*x);
        acc.max((c - k as f64 / n).abs()).max(((k + 1) as f64 / n - c).abs())
    }))
}

pub fn lan_diagnostics(config: &DgpConfig, pert: &PerturbationSpec, reps: usize) -> Result<LanReport> {
    if reps < 2 {
        return invalid("need at least two replications");
    }
    let (geometry, params) = design_geometry(config)?;
    let p = pert.resolve(config.t)?;
    p.validate(&params)?;
    let terms = per_replication(config, reps, |data, truth| delta_terms_with(&geometry, &p, truth, data))?;
    let deltas: Vec<f64> = terms.iter().map(DeltaTerms::delta).collect();
    let lrs: Vec<f64> = terms.iter().map(|d| d.lr_exact).collect();
    let target = geometry.variance_formula(&p);
    let delta_variance = sample_var(&deltas);
    Ok(LanReport {
        mode: p.mode,
        reps,
        delta_mean: mean(&deltas),
        delta_mean_mcse: (delta_variance / reps as f64).sqrt(),
        delta_variance,
        target_variance: target,
        exact_variance: geometry.variance_exact(&p),
        variance_ratio: delta_variance / target,
        ks_distance: ks_distance(&deltas, target)?,
        lr_mean: mean(&lrs),
        deltas,
    })
}

/// Residual summary at one `(N, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub reps: usize,
    pub median_abs_residual: f64,
    pub mean_residual: f64,
    pub median_abs_lr: f64,
    pub variance_formula: f64,
    /// `N / T^3`
    pub regime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub mode: Mode,
    pub rows: Vec<LadderRow>,
    /// Median absolute residuals are nonincreasing along the ladder.
    pub monotone: bool,
}

/// Expansion residuals along a sequence of `(N, T)` designs sharing the rest of `base`.
pub fn residual_ladder(
    base: &DgpConfig,
    ladder: &[(usize, usize)],
    pert: &PerturbationSpec,
    reps: usize,
) -> Result<LadderReport> {
    if ladder.is_empty() || reps == 0 {
        return invalid("ladder and replication count must be nonempty");
    }
    let mut rows = Vec::with_capacity(ladder.len());
    for &(n, t) in ladder {
        let config = DgpConfig { n, t, ..base.clone() };
        if config.outside_asymptotic_regime() {
            log::warn!("N = {n}, T = {t} has N > T^3; the expansion is not expected to hold");
        }
        let (geometry, params) = design_geometry(&config)?;
        let p = pert.resolve(t)?;
        p.validate(&params)?;
        let terms = per_replication(&config, reps, |data, truth| delta_terms_with(&geometry, &p, truth, data))?;
        let abs_res: Vec<f64> = terms.iter().map(|d| d.residual.abs()).collect();
        let res: Vec<f64> = terms.iter().map(|d| d.residual).collect();
        let abs_lr: Vec<f64> = terms.iter().map(|d| d.lr_exact.abs()).collect();
        rows.push(LadderRow {
            n,
            t,
            reps,
            median_abs_residual: median(&abs_res),
            mean_residual: mean(&res),
            median_abs_lr: median(&abs_lr),
            variance_formula: geometry.variance_formula(&p),
            regime: n as f64 / (t as f64).powi(3),
        });
    }
    let monotone = rows
        .windows(2)
        .all(|w| w[1].median_abs_residual <= w[0].median_abs_residual);
    Ok(LadderReport {
        mode: pert.mode,
        rows,
        monotone,
    })
}

/// Factors `psi(t/T)`, variances `sigma^2(t/T)` and a smooth perturbation, for
/// checking the terms the smooth expansion drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothDesign {
    pub alpha: f64,
    pub psi: Vec<SeriesSpec>,
    pub sigma2: SeriesSpec,
    pub atilde: f64,
    pub ftilde: Vec<SeriesSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothRow {
    #[serde(rename = "T")]
    pub t: usize,
    /// Largest entry of `T^{-1} sum_t sigma_t^{-2} ftilde_t f_t'`.
    pub orthogonality: f64,
    /// `|T^{-1} tr((LF)' M Ftilde)|`
    pub cross_term: f64,
    pub nu_t: f64,
    /// `atilde^2 nu_T`, the variance of the dropped `d3`.
    pub d3_variance: f64,
    /// Variance of `d1` computed with `M` minus `d1` computed with `D^{-1}`.
    pub substitution_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothReport {
    pub rows: Vec<SmoothRow>,
    pub cross_decreasing: bool,
    pub nu_decreasing: bool,
}

pub fn smooth_simplification_check(design: &SmoothDesign, t_grid: &[usize]) -> Result<SmoothReport> {
    if design.psi.len() != design.ftilde.len() || design.psi.is_empty() {
        return invalid("psi and ftilde need the same positive number of series");
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let r = design.psi.len();
        let mut f = DMatrix::zeros(t, r);
        let mut ft = DMatrix::zeros(t, r);
        for k in 0..r {
            f.set_column(k, &design.psi[k].evaluate(t)?);
            ft.set_column(k, &design.ftilde[k].evaluate(t)?);
        }
        let dvec = design.sigma2.evaluate(t)?;
        let params = ModelParams::new(design.alpha, DVector::zeros(t), f, dvec)?;
        let geometry = Geometry::new(&params)?;
        // D^{-1} - M = D^{-1} F (F'D^{-1}F)^{-1} F'D^{-1}
        let mut dinv = DMatrix::zeros(t, t);
        for s in 0..t {
            dinv[(s, s)] = 1.0 / params.dvec[s];
        }
        let gap = &dinv - &geometry.m;
        let substitution_variance = (ft.transpose() * gap * &ft).trace() / t as f64;
        rows.push(SmoothRow {
            t,
            orthogonality: weighted_inner(&ft, &params.f, &params.dvec).amax(),
            cross_term: geometry.trace_m(&geometry.lf, &ft).abs(),
            nu_t: geometry.nu,
            d3_variance: design.atilde * design.atilde * geometry.nu,
            substitution_variance,
        });
    }
    let decreasing = |get: fn(&SmoothRow) -> f64| rows.windows(2).all(|w| get(&w[1]) < get(&w[0]));
    Ok(SmoothReport {
        cross_decreasing: decreasing(|r| r.cross_term),
        nu_decreasing: decreasing(|r| r.nu_t),
        rows,
    })
}
