//! Data generating processes and Monte Carlo drivers.
//!
//! Each individual's recursion starts at `y = 0` in period `-burn_in`, with the
//! period-one values of `delta`, `f` and `sigma^2` in force before period one.
//! The retained panel covers periods `1..T`. The pre-sample collapses into
//! period-one "effective" parameters, so the model `B y_i = delta + F lambda_i + eps_i`
//! holds exactly for the retained data with the values stored in [`TruthRecord`].
//!
//! Replication `k` of seed `s` draws from `ChaCha8Rng::seed_from_u64(s)` on
//! stream `k`, so results do not depend on thread count or on how many other
//! replications run.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efficiency::gamma_t_closed;
use crate::error::{invalid, PanelError, Result};
use crate::estimation::{estimate_fixed_effects, estimate_qmle, EstimationOptions};
use crate::likelihood::{normalize_f, ModelParams, PanelData};
use crate::structural::VARIANCE_FLOOR;

/// A deterministic sequence over `t = 1..T`, evaluated at `s = t / T` where a
/// shape is involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeriesSpec {
    Constant { value: f64 },
    /// `intercept + slope * t / T`
    Linear { intercept: f64, slope: f64 },
    /// `sum_k coeffs[k] * (t/T)^k`
    Polynomial { coeffs: Vec<f64> },
    /// `offset + amplitude * sin(2 pi cycles t / T + phase)`
    Sine {
        offset: f64,
        amplitude: f64,
        cycles: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `scale * ratio^(t-1)`; square-summable for `|ratio| < 1` whatever `T` is.
    Geometric { scale: f64, ratio: f64 },
    /// Independent normal draws fixed by their own seed, the same in every replication.
    Random { mean: f64, sd: f64, seed: u64 },
    /// Explicit values, one per period.
    Table { values: Vec<f64> },
}

impl SeriesSpec {
    pub fn evaluate(&self, t: usize) -> Result<DVector<f64>> {
        let tf = t as f64;
        let at = |g: &dyn Fn(f64) -> f64| DVector::from_fn(t, |k, _| g((k + 1) as f64 / tf));
        let out = match self {
            Self::Constant { value } => DVector::from_element(t, *value),
            Self::Linear { intercept, slope } => at(&|s| intercept + slope * s),
            Self::Polynomial { coeffs } => at(&|s| coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)),
            Self::Sine {
                offset,
                amplitude,
                cycles,
                phase,
            } => at(&|s| offset + amplitude * (std::f64::consts::TAU * cycles * s + phase).sin()),
            Self::Geometric { scale, ratio } => DVector::from_fn(t, |k, _| scale * ratio.powi(k as i32)),
            Self::Random { mean, sd, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                DVector::from_fn(t, |_, _| mean + sd * rng.sample::<f64, _>(StandardNormal))
            }
            Self::Table { values } => {
                if values.len() != t {
                    return invalid(format!("table has {} values but T = {t}", values.len()));
                }
                DVector::from_column_slice(values)
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return invalid("series produced non-finite values");
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShockDist {
    Gaussian,
    /// Scaled to unit variance; needs `df >= 5` for finite fourth moments.
    StudentT { df: f64 },
    /// `(X - df) / sqrt(2 df)` for `X ~ chi2(df)`.
    Chi2 { df: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingDist {
    Gaussian,
    /// `+1` or `-1` with equal probability.
    Rademacher,
}

fn default_burn_in() -> usize {
    200
}

fn default_shocks() -> ShockDist {
    ShockDist::Gaussian
}

fn default_loadings() -> LoadingDist {
    LoadingDist::Gaussian
}

fn default_delta() -> SeriesSpec {
    SeriesSpec::Constant { value: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub r: usize,
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: SeriesSpec,
    /// One series per factor.
    #[serde(default)]
    pub factors: Vec<SeriesSpec>,
    pub sigma2: SeriesSpec,
    #[serde(default = "default_shocks")]
    pub shocks: ShockDist,
    #[serde(default = "default_loadings")]
    pub loadings: LoadingDist,
    /// Rescale the drawn loadings to sample mean zero and sample covariance `I_r`.
    #[serde(default)]
    pub standardize_loadings: bool,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Validated series values of a configuration.
#[derive(Debug, Clone)]
struct Resolved {
    delta: DVector<f64>,
    f: DMatrix<f64>,
    sigma2: DVector<f64>,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    fn resolve(&self) -> Result<Resolved> {
        if self.n == 0 {
            return invalid("N must be positive");
        }
        if self.t < 2 {
            return invalid(format!("T = {} < 2", self.t));
        }
        if !(self.alpha.abs() < 1.0) {
            return invalid(format!("alpha = {} must satisfy |alpha| < 1", self.alpha));
        }
        if self.burn_in < 100 {
            return invalid(format!("burn_in = {} < 100", self.burn_in));
        }
        if self.factors.len() != self.r {
            return invalid(format!("r = {} but {} factor series given", self.r, self.factors.len()));
        }
        if self.standardize_loadings && self.n <= self.r {
            return invalid("standardized loadings need N > r");
        }
        match self.shocks {
            ShockDist::StudentT { df } if !(df >= 5.0) => {
                return invalid(format!("student_t needs df >= 5 for finite fourth moments, got {df}"))
            }
            ShockDist::Chi2 { df } if !(df > 0.0) => return invalid(format!("chi2 needs df > 0, got {df}")),
            _ => {}
        }
        let delta = self.delta.evaluate(self.t)?;
        let sigma2 = self.sigma2.evaluate(self.t)?;
        if let Some(v) = sigma2.iter().find(|v| !(**v >= VARIANCE_FLOOR)) {
            return invalid(format!("sigma2 value {v} is below the floor {VARIANCE_FLOOR}"));
        }
        let mut f = DMatrix::zeros(self.t, self.r);
        for (k, spec) in self.factors.iter().enumerate() {
            f.set_column(k, &spec.evaluate(self.t)?);
        }
        Ok(Resolved { delta, f, sigma2 })
    }

    /// True when `N > T^3`, where the asymptotic representation is not expected to hold.
    pub fn outside_asymptotic_regime(&self) -> bool {
        (self.n as f64) > (self.t as f64).powi(3)
    }
}

/// Everything the expansion diagnostics need about one simulated panel.
///
/// `params` holds the effective parameters: for period one,
/// `delta_1* = g delta_1`, `f_1* = g f_1` with `g = sum_{k<K} alpha^k` and
/// `sigma_1*^2 = sigma_1^2 sum_{k<K} alpha^{2k}`, where `K = burn_in + 1`.
/// `eps` holds the matching shocks, so `B y_i = delta* + F* lambda_i + eps_i`
/// exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub params: ModelParams,
    /// `N x r`
    pub lambda: DMatrix<f64>,
    /// `N x T`
    pub eps: DMatrix<f64>,
    /// Configured period-one values before the pre-sample adjustment.
    pub nominal_delta1: f64,
    pub nominal_sigma2_1: f64,
    pub replication: u64,
    pub seed: u64,
}

impl TruthRecord {
    /// The panel implied by the record, `y_i = B^{-1}(delta + F lambda_i + eps_i)`.
    pub fn panel(&self) -> Result<PanelData> {
        let p = &self.params;
        let (n, t) = (self.eps.nrows(), p.t());
        let mut y = &self.lambda * p.f.transpose() + &self.eps;
        for mut row in y.row_iter_mut() {
            row += p.delta.transpose();
        }
        for s in 1..t {
            let prev = y.column(s - 1) * p.alpha;
            let mut col = y.column_mut(s);
            col += prev;
        }
        debug_assert_eq!(y.nrows(), n);
        PanelData::new(y)
    }
}

fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn draw_shock(rng: &mut ChaCha8Rng, dist: &ShockDist) -> f64 {
    match *dist {
        ShockDist::Gaussian => rng.sample(StandardNormal),
        ShockDist::StudentT { df } => {
            let x: f64 = StudentT::new(df).expect("df validated").sample(rng);
            x * ((df - 2.0) / df).sqrt()
        }
        ShockDist::Chi2 { df } => {
            let x: f64 = ChiSquared::new(df).expect("df validated").sample(rng);
            (x - df) / (2.0 * df).sqrt()
        }
    }
}

fn standardize(lambda: &mut DMatrix<f64>) -> Result<()> {
    let (n, r) = (lambda.nrows(), lambda.ncols());
    let mean = lambda.row_mean();
    for mut row in lambda.row_iter_mut() {
        row -= &mean;
    }
    let cov = lambda.transpose() * &*lambda / n as f64;
    let chol = cov
        .cholesky()
        .ok_or_else(|| PanelError::Degenerate("drawn loadings are collinear".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(r, r))
        .ok_or_else(|| PanelError::Degenerate("drawn loadings are collinear".into()))?;
    *lambda = &*lambda * l_inv.transpose();
    Ok(())
}

/// Replication `rep` of the configured design.
pub fn simulate_replication(config: &DgpConfig, rep: u64) -> Result<(PanelData, TruthRecord)> {
    let res = config.resolve()?;
    let (n, t, r) = (config.n, config.t, config.r);
    let alpha = config.alpha;
    let mut rng = replication_rng(config.seed, rep);

    let mut y = DMatrix::zeros(n, t);
    let mut lambda = DMatrix::zeros(n, r);
    let mut eps = DMatrix::zeros(n, t);
    let sd: Vec<f64> = res.sigma2.iter().map(|v| v.sqrt()).collect();
    for i in 0..n {
        for k in 0..r {
            lambda[(i, k)] = match config.loadings {
                LoadingDist::Gaussian => rng.sample(StandardNormal),
                LoadingDist::Rademacher => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
        }
    }
    if config.standardize_loadings {
        standardize(&mut lambda)?;
    }
    let common = &lambda * res.f.transpose();
    for i in 0..n {
        // periods -burn_in+1 ..= 1 share the period-one parameters
        let mut level = 0.0;
        let mut eps_star = 0.0;
        for _ in 0..=config.burn_in {
            let e = sd[0] * draw_shock(&mut rng, &config.shocks);
            level = alpha * level + res.delta[0] + common[(i, 0)] + e;
            eps_star = alpha * eps_star + e;
        }
        y[(i, 0)] = level;
        eps[(i, 0)] = eps_star;
        for s in 1..t {
            let e = sd[s] * draw_shock(&mut rng, &config.shocks);
            level = alpha * level + res.delta[s] + common[(i, s)] + e;
            y[(i, s)] = level;
            eps[(i, s)] = e;
        }
    }

    let k = (config.burn_in + 1) as i32;
    let gain = if alpha == 0.0 { 1.0 } else { (1.0 - alpha.powi(k)) / (1.0 - alpha) };
    let var_gain = if alpha == 0.0 {
        1.0
    } else {
        (1.0 - alpha.powi(2 * k)) / (1.0 - alpha * alpha)
    };
    let mut delta = res.delta.clone();
    delta[0] *= gain;
    let mut f = res.f.clone();
    f.row_mut(0).scale_mut(gain);
    let mut dvec = res.sigma2.clone();
    dvec[0] *= var_gain;
    let params = ModelParams::new(alpha, delta, f, dvec)?;
    let truth = TruthRecord {
        params,
        lambda,
        eps,
        nominal_delta1: res.delta[0],
        nominal_sigma2_1: res.sigma2[0],
        replication: rep,
        seed: config.seed,
    };
    Ok((PanelData::new(y)?, truth))
}

/// Replication zero of the configured design.
pub fn simulate_panel(config: &DgpConfig) -> Result<(PanelData, TruthRecord)> {
    simulate_replication(config, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Qmle,
    FixedEffects,
}

/// One replication of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub replication: u64,
    pub alpha_hat: f64,
    /// `NaN` for the fixed-effects estimator, which has no likelihood-based error.
    pub se: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Message of a hard failure; such rows carry `NaN` estimates.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub estimator: EstimatorChoice,
    pub reps: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub alpha: f64,
    pub alpha_hats: Vec<f64>,
    pub bias: f64,
    /// Monte Carlo standard error of `bias`.
    pub bias_mcse: f64,
    /// Sample variance of `sqrt(NT)(alpha_hat - alpha)`.
    pub variance_scaled: f64,
    /// `gamma_T` at the true effective variances.
    pub gamma_t: f64,
    pub bound_alpha: f64,
    pub coverage_95: f64,
    /// Per period, sample variance of `sqrt(N)(fhat_t - f_t)` after sign
    /// alignment, averaged over factor coordinates.
    pub factor_var_scaled: Vec<f64>,
    /// True effective `sigma_t^2`, the bound for `factor_var_scaled`.
    pub factor_bound: Vec<f64>,
    /// Replications that hit the iteration cap; kept in the statistics.
    pub failures: usize,
    /// Replications that raised an error; excluded from the statistics.
    pub errors: usize,
    /// False when more than 10% of replications failed or errored.
    pub valid: bool,
    pub regime_note: Option<String>,
    pub rows: Vec<RepRow>,
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Flips columns of `est` to correlate positively with the matching column of `truth`.
pub fn align_signs(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = est.clone();
    for k in 0..est.ncols().min(truth.ncols()) {
        let (a, b) = (est.column(k), truth.column(k));
        let (ma, mb) = (a.mean(), b.mean());
        let cov: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let raw = a.dot(&b);
        // correlation is undefined for a constant column; fall back to the inner product
        let score = if cov.abs() > 0.0 { cov } else { raw };
        if score < 0.0 {
            out.column_mut(k).neg_mut();
        }
    }
    out
}

struct QmleRep {
    row: RepRow,
    factor_dev: Option<DMatrix<f64>>,
}

fn qmle_rep(config: &DgpConfig, rep: u64, opts: &EstimationOptions) -> QmleRep {
    let outcome = simulate_replication(config, rep).and_then(|(data, truth)| {
        let fit = estimate_qmle(&data, config.r, opts)?;
        let (truth_f, _) = normalize_f(&truth.params.f, &truth.params.dvec)?;
        let aligned = align_signs(&fit.params.f, &truth_f);
        let dev = (aligned - truth_f) * (config.n as f64).sqrt();
        Ok((fit, dev))
    });
    match outcome {
        Ok((fit, dev)) => QmleRep {
            row: RepRow {
                replication: rep,
                alpha_hat: fit.params.alpha,
                se: fit.se_alpha,
                converged: fit.converged,
                iterations: fit.iterations,
                error: None,
            },
            factor_dev: Some(dev),
        },
        Err(e) => QmleRep {
            row: error_row(rep, e),
            factor_dev: None,
        },
    }
}

fn error_row(rep: u64, e: PanelError) -> RepRow {
    RepRow {
        replication: rep,
        alpha_hat: f64::NAN,
        se: f64::NAN,
        converged: false,
        iterations: 0,
        error: Some(e.to_string()),
    }
}

fn fe_rep(config: &DgpConfig, rep: u64, opts: &EstimationOptions) -> RepRow {
    match simulate_replication(config, rep).and_then(|(data, _)| estimate_fixed_effects(&data, config.r, opts)) {
        Ok(fe) => RepRow {
            replication: rep,
            alpha_hat: fe.alpha,
            se: f64::NAN,
            converged: fe.converged,
            iterations: fe.iterations,
            error: None,
        },
        Err(e) => error_row(rep, e),
    }
}

fn check_mc_inputs(config: &DgpConfig, reps: usize, min_reps: usize) -> Result<()> {
    config.validate()?;
    if reps < min_reps {
        return invalid(format!("need at least {min_reps} replications, got {reps}"));
    }
    if config.r == 0 {
        return invalid("Monte Carlo estimation needs r >= 1");
    }
    Ok(())
}

/// Simulate-then-estimate over `reps` replications in parallel (on the
/// current rayon pool); results are keyed by replication index.
pub fn mc_estimation(
    config: &DgpConfig,
    reps: usize,
    estimator: EstimatorChoice,
    opts: &EstimationOptions,
) -> Result<MonteCarloSummary> {
    check_mc_inputs(config, reps, 50)?;
    let res = config.resolve()?;
    let (n, t, r) = (config.n, config.t, config.r);

    let (rows, devs): (Vec<RepRow>, Vec<Option<DMatrix<f64>>>) = match estimator {
        EstimatorChoice::Qmle => (0..reps as u64)
            .into_par_iter()
            .map(|k| {
                let q = qmle_rep(config, k, opts);
                (q.row, q.factor_dev)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .unzip(),
        EstimatorChoice::FixedEffects => {
            let rows: Vec<RepRow> = (0..reps as u64).into_par_iter().map(|k| fe_rep(config, k, opts)).collect();
            let devs = vec![None; rows.len()];
            (rows, devs)
        }
    };

    let ok: Vec<&RepRow> = rows.iter().filter(|row| row.error.is_none()).collect();
    let errors = rows.len() - ok.len();
    let failures = ok.iter().filter(|row| !row.converged).count();
    let hats: Vec<f64> = ok.iter().map(|row| row.alpha_hat).collect();
    let alpha = config.alpha;
    let nt = (n * t) as f64;
    let bias = if hats.is_empty() { f64::NAN } else { mean(&hats) - alpha };
    let var = sample_var(&hats);
    let covered = ok
        .iter()
        .filter(|row| row.se.is_finite() && (row.alpha_hat - alpha).abs() <= 1.96 * row.se)
        .count();
    let coverage = if estimator == EstimatorChoice::Qmle && !ok.is_empty() {
        covered as f64 / ok.len() as f64
    } else {
        f64::NAN
    };

    // effective period-one variance, as in the truth record
    let k = (config.burn_in + 1) as i32;
    let mut dstar = res.sigma2.clone();
    dstar[0] *= if alpha == 0.0 { 1.0 } else { (1.0 - alpha.powi(2 * k)) / (1.0 - alpha * alpha) };
    let gamma = gamma_t_closed(alpha, &dstar)?;

    let devs: Vec<&DMatrix<f64>> = devs.iter().flatten().collect();
    let factor_var_scaled = (0..t)
        .map(|s| {
            if devs.len() < 2 {
                return f64::NAN;
            }
            let per_coord: Vec<f64> = (0..r)
                .map(|c| sample_var(&devs.iter().map(|d| d[(s, c)]).collect::<Vec<_>>()))
                .collect();
            mean(&per_coord)
        })
        .collect();

    let bad = failures + errors;
    Ok(MonteCarloSummary {
        estimator,
        reps,
        n,
        t,
        alpha,
        alpha_hats: hats.clone(),
        bias,
        bias_mcse: (var / hats.len() as f64).sqrt(),
        variance_scaled: var * nt,
        gamma_t: gamma,
        bound_alpha: 1.0 / gamma,
        coverage_95: coverage,
        factor_var_scaled,
        factor_bound: dstar.iter().copied().collect(),
        failures,
        errors,
        valid: bad * 10 <= reps,
        regime_note: config
            .outside_asymptotic_regime()
            .then(|| "outside asymptotic regime: N > T^3".to_string()),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub replication: u64,
    pub alpha_qmle: f64,
    pub alpha_fe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    #[serde(rename = "T")]
    pub t: usize,
    pub bias_fe: f64,
    pub bias_fe_mcse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeComparison {
    pub reps: usize,
    pub alpha: f64,
    pub bias_qmle: f64,
    pub bias_qmle_mcse: f64,
    pub bias_fe: f64,
    pub bias_fe_mcse: f64,
    /// `|bias_fe| / |bias_qmle|`
    pub bias_ratio: f64,
    /// Fixed-effects bias at each panel length of the grid.
    pub fe_profile: Vec<BiasPoint>,
    pub errors: usize,
    pub valid: bool,
    pub rows: Vec<PairRow>,
}

/// Both estimators on the same replications, plus a fixed-effects bias
/// profile over `t_grid` (each length simulated with the same seed).
pub fn compare_fe_qmle(
    config: &DgpConfig,
    reps: usize,
    t_grid: &[usize],
    opts: &EstimationOptions,
) -> Result<FeComparison> {
    check_mc_inputs(config, reps, 1)?;
    if !matches!(config.sigma2, SeriesSpec::Constant { .. }) {
        return invalid("the fixed-effects comparator needs homoskedastic shocks (constant sigma2)");
    }
    let outcomes: Vec<std::result::Result<PairRow, String>> = (0..reps as u64)
        .into_par_iter()
        .map(|k| {
            let (data, _) = simulate_replication(config, k).map_err(|e| e.to_string())?;
            let q = estimate_qmle(&data, config.r, opts).map_err(|e| e.to_string())?;
            let fe = estimate_fixed_effects(&data, config.r, opts).map_err(|e| e.to_string())?;
            Ok(PairRow {
                replication: k,
                alpha_qmle: q.params.alpha,
                alpha_fe: fe.alpha,
            })
        })
        .collect();
    let rows: Vec<PairRow> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
    let errors = reps - rows.len();
    if rows.len() < 2 {
        return Err(PanelError::Degenerate(format!("{errors} of {reps} paired replications failed")));
    }
    let aq: Vec<f64> = rows.iter().map(|p| p.alpha_qmle).collect();
    let af: Vec<f64> = rows.iter().map(|p| p.alpha_fe).collect();
    let m = rows.len() as f64;
    let bias_qmle = mean(&aq) - config.alpha;
    let bias_fe = mean(&af) - config.alpha;

    let mut fe_profile = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let cfg = DgpConfig { t, ..config.clone() };
        let hats: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|k| fe_rep(&cfg, k, opts))
            .collect::<Vec<_>>()
            .into_iter()
            .filter(|row| row.error.is_none())
            .map(|row| row.alpha_hat)
            .collect();
        fe_profile.push(BiasPoint {
            t,
            bias_fe: mean(&hats) - config.alpha,
            bias_fe_mcse: (sample_var(&hats) / hats.len() as f64).sqrt(),
        });
    }

    Ok(FeComparison {
        reps,
        alpha: config.alpha,
        bias_qmle,
        bias_qmle_mcse: (sample_var(&aq) / m).sqrt(),
        bias_fe,
        bias_fe_mcse: (sample_var(&af) / m).sqrt(),
        bias_ratio: bias_fe.abs() / bias_qmle.abs(),
        fe_profile,
        errors,
        valid: errors * 10 <= reps,
        rows,
    })
}
