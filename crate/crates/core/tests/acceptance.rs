//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the summary lines are always
//! printed, including under `cargo test`.

use std::time::Instant;

use panelqmle_core::efficiency::{gamma_t_closed, gamma_t_trace, lagged_factor_traces, nu_t};
use panelqmle_core::estimation::EstimationOptions;
use panelqmle_core::likelihood::{loglik_concentrated, score_analytic, score_numeric, ModelParams, PanelData};
use panelqmle_core::local_expansion::{
    efficient_score_orthogonality, lan_diagnostics, residual_ladder, Mode, PerturbationSpec,
};
use panelqmle_core::simulation::{
    compare_fe_qmle, mc_estimation, simulate_replication, DgpConfig, EstimatorChoice, SeriesSpec,
};
use panelqmle_core::structural::{build_structural, factorize_covariance};
use panelqmle_core::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn config(json: &str) -> DgpConfig {
    serde_json::from_str(json).expect("acceptance config parses")
}

/// alpha = 0.5, sigma^2 = 1, N = 1000, T = 20, one zero-mean oscillating factor.
fn attainment_design(shocks: &str) -> DgpConfig {
    config(&format!(
        r#"{{"N": 1000, "T": 20, "r": 1, "alpha": 0.5,
            "factors": [{{"kind": "sine", "offset": 0.0, "amplitude": 1.0, "cycles": 3.0}}],
            "sigma2": {{"kind": "constant", "value": 1.0}},
            "shocks": {shocks}, "seed": 20240301}}"#
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn bound_value() -> Outcome {
    let start = Instant::now();
    let gamma = gamma_t_closed(0.5, &DVector::from_element(500, 1.0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (eg, eb) = (rel(gamma, 4.0 / 3.0), rel(1.0 / gamma, 0.75));
    outcome(
        eg < 0.01 && eb < 0.01 && secs < 1.0,
        format!("gamma_T={gamma:.6} (rel err {eg:.2e}), bound={:.6} (rel err {eb:.2e}), {secs:.3}s", 1.0 / gamma),
    )
}

fn two_implementations() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.random_range(2..=100);
        let alpha = rng.random_range(-0.99..0.99);
        let d = DVector::from_fn(t, |_, _| rng.random_range(0.05..5.0));
        let a = gamma_t_closed(alpha, &d).unwrap();
        let b = gamma_t_trace(alpha, &d).unwrap();
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 10.0,
        format!("max |closed - trace| / max(1, gamma) = {worst:.2e} over 1000 draws, {secs:.2}s"),
    )
}

struct Attainment {
    variance_ratio: f64,
    bias: f64,
    bias_mcse: f64,
    coverage: f64,
    bad: usize,
}

fn run_attainment(shocks: &str) -> Attainment {
    let s = mc_estimation(&attainment_design(shocks), 500, EstimatorChoice::Qmle, &EstimationOptions::default()).unwrap();
    Attainment {
        variance_ratio: s.variance_scaled / s.bound_alpha,
        bias: s.bias,
        bias_mcse: s.bias_mcse,
        coverage: s.coverage_95,
        bad: s.failures + s.errors,
    }
}

fn attainment(a: &Attainment) -> Outcome {
    let ok = (a.variance_ratio - 1.0).abs() <= 0.2 && a.bias.abs() <= 3.0 * a.bias_mcse && a.bad == 0;
    outcome(
        ok,
        format!(
            "NT var / (1/gamma_T) = {:.3}, bias = {:.2e} (mcse {:.2e}), failed reps {}",
            a.variance_ratio, a.bias, a.bias_mcse, a.bad
        ),
    )
}

fn robustness() -> Outcome {
    let a = run_attainment(r#"{"dist": "student_t", "df": 8.0}"#);
    outcome(
        (a.variance_ratio - 1.0).abs() <= 0.2 && a.bad == 0,
        format!("student-t(8): NT var / (1/gamma_T) = {:.3}, failed reps {}", a.variance_ratio, a.bad),
    )
}

fn factor_bound() -> Outcome {
    let cfg = config(
        r#"{"N": 1000, "T": 50, "r": 1, "alpha": 0.5,
            "factors": [{"kind": "sine", "offset": 0.0, "amplitude": 1.0, "cycles": 3.0}],
            "sigma2": {"kind": "linear", "intercept": 1.0, "slope": 1.0},
            "standardize_loadings": true, "seed": 20240305}"#,
    );
    let s = mc_estimation(&cfg, 2000, EstimatorChoice::Qmle, &EstimationOptions::default()).unwrap();
    let ratios: Vec<f64> = s
        .factor_var_scaled
        .iter()
        .zip(&s.factor_bound)
        .map(|(v, b)| v / b)
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    outcome(
        lo >= 0.8 && hi <= 1.2 && s.failures + s.errors == 0,
        format!("N var(fhat_t - f_t) / sigma_t^2 in [{lo:.3}, {hi:.3}] over {} periods", ratios.len()),
    )
}

fn coverage(a: &Attainment) -> Outcome {
    outcome(
        (0.92..=0.98).contains(&a.coverage),
        format!("95% interval coverage = {:.3} over 500 replications", a.coverage),
    )
}

fn nickell_ordering() -> Outcome {
    let cfg = config(
        r#"{"N": 1000, "T": 10, "r": 1, "alpha": 0.5,
            "factors": [{"kind": "constant", "value": 1.0}],
            "sigma2": {"kind": "constant", "value": 1.0}, "seed": 20240307}"#,
    );
    let c = compare_fe_qmle(&cfg, 200, &[10, 20], &EstimationOptions::default()).unwrap();
    let (b10, b20) = (c.fe_profile[0].bias_fe, c.fe_profile[1].bias_fe);
    let ok = c.bias_fe.abs() > 5.0 * c.bias_qmle.abs() && b20.abs() < b10.abs() && c.valid;
    outcome(
        ok,
        format!(
            "bias_FE = {:.4}, bias_QMLE = {:.2e} (ratio {:.1}), bias_FE at T=10/20 = {b10:.4}/{b20:.4}",
            c.bias_fe, c.bias_qmle, c.bias_ratio
        ),
    )
}

fn expansion_validity() -> Outcome {
    let base = config(
        r#"{"N": 100, "T": 10, "r": 1, "alpha": 0.5,
            "factors": [{"kind": "constant", "value": 1.0}],
            "sigma2": {"kind": "constant", "value": 1.0},
            "standardize_loadings": true, "seed": 7}"#,
    );
    let pert = PerturbationSpec {
        atilde: 1.0,
        ftilde: vec![SeriesSpec::Sine {
            offset: 0.0,
            amplitude: 1.0,
            cycles: 1.0,
            phase: 0.0,
        }],
        mode: Mode::EllInfinity,
    };
    let report = residual_ladder(&base, &[(100, 10), (400, 20), (1600, 40)], &pert, 200).unwrap();
    let medians: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("({},{}): {:.3}", r.n, r.t, r.median_abs_residual))
        .collect();
    let strict = report
        .rows
        .windows(2)
        .all(|w| w[1].median_abs_residual < w[0].median_abs_residual);
    outcome(strict, format!("median |residual| {}", medians.join(", ")))
}

fn variance_formula() -> Outcome {
    let designs = [
        (
            Mode::EllInfinity,
            r#"{"kind": "sine", "offset": 0.0, "amplitude": 1.0, "cycles": 3.0}"#,
            SeriesSpec::Constant { value: 1.0 },
        ),
        (
            Mode::SmoothC,
            r#"{"kind": "constant", "value": 1.0}"#,
            SeriesSpec::Sine {
                offset: 0.0,
                amplitude: 1.0,
                cycles: 1.0,
                phase: 0.0,
            },
        ),
        (
            Mode::Ell2,
            r#"{"kind": "random", "mean": 0.0, "sd": 1.0, "seed": 3}"#,
            SeriesSpec::Geometric { scale: 1.0, ratio: 0.7 },
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (mode, factor, ftilde) in designs {
        let cfg = config(&format!(
            r#"{{"N": 1000, "T": 20, "r": 1, "alpha": 0.5, "factors": [{factor}],
                "sigma2": {{"kind": "constant", "value": 1.0}}, "seed": 20240309}}"#
        ));
        let pert = PerturbationSpec {
            atilde: 1.0,
            ftilde: vec![ftilde],
            mode,
        };
        let r = lan_diagnostics(&cfg, &pert, 2000).unwrap();
        pass &= (r.variance_ratio - 1.0).abs() <= 0.1;
        parts.push(format!(
            "{mode}: var/formula = {:.3} (exact {:.3}, KS {:.3})",
            r.variance_ratio,
            r.delta_variance / r.exact_variance,
            r.ks_distance
        ));
    }
    outcome(pass, parts.join("; "))
}

fn orthogonality() -> Outcome {
    let r = efficient_score_orthogonality(&attainment_design(r#"{"dist": "gaussian"}"#), 2000).unwrap();
    outcome(
        r.max_abs_correlation < 0.07 && r.projection_rel_err < 0.02,
        format!(
            "max |corr(Delta_2, v_t)| = {:.3} (noise band {:.3}), projection rel err = {:.2e}, var(Delta_2)/gamma_T = {:.3}",
            r.max_abs_correlation,
            r.noise_band,
            r.projection_rel_err,
            r.efficient_score_variance / r.gamma_t
        ),
    )
}

fn smooth_limit_consequences() -> Outcome {
    let alpha = 0.5;
    let psi = SeriesSpec::Linear {
        intercept: 1.0,
        slope: 1.0,
    };
    let f_at = |t: usize| DMatrix::from_column_slice(t, 1, psi.evaluate(t).unwrap().as_slice());
    let ones = |t: usize| DVector::from_element(t, 1.0);
    let (lag, lag2) = lagged_factor_traces(alpha, &f_at(2000), &ones(2000)).unwrap();
    let integral = 7.0 / 3.0;
    let (e1, e2) = (
        rel(lag[(0, 0)], integral / (1.0 - alpha)),
        rel(lag2[(0, 0)], integral / (1.0 - alpha).powi(2)),
    );
    let grid = [50, 100, 200, 400];
    let nus: Vec<f64> = grid.iter().map(|&t| nu_t(alpha, &f_at(t), &ones(t)).unwrap()).collect();
    let decreasing = nus.windows(2).all(|w| w[1] < w[0]);
    outcome(
        e1 < 0.02 && e2 < 0.02 && decreasing && nus[3] < nus[1],
        format!(
            "traces at T=2000: {:.4} (rel err {e1:.2e}), {:.4} (rel err {e2:.2e}); nu_T at T=50..400: {:?}",
            lag[(0, 0)],
            lag2[(0, 0)],
            nus.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
        ),
    )
}

fn infrastructure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = 30;
    let f = DMatrix::from_fn(t, 2, |_, _| rng.random_range(-1.5..1.5));
    let d = DVector::from_fn(t, |_, _| rng.random_range(0.3..3.0));
    let fact = factorize_covariance(&f, &d).unwrap();
    let dense = (&f * f.transpose() + DMatrix::from_diagonal(&d)).try_inverse().unwrap();
    let woodbury = (&fact.inv - &dense).norm() / dense.norm();

    let s = build_structural(0.7, 50).unwrap();
    let l_err = (&s.l - &s.j * s.b.clone().try_inverse().unwrap()).amax();

    let cfg = config(
        r#"{"N": 200, "T": 8, "r": 2, "alpha": 0.4,
            "delta": {"kind": "linear", "intercept": 0.5, "slope": 1.0},
            "factors": [{"kind": "constant", "value": 1.0},
                        {"kind": "sine", "offset": 0.0, "amplitude": 1.0, "cycles": 1.0}],
            "sigma2": {"kind": "linear", "intercept": 1.0, "slope": 1.0}, "seed": 4}"#,
    );
    let (data, truth) = simulate_replication(&cfg, 0).unwrap();
    let p = &truth.params;
    let at = ModelParams::new(p.alpha + 0.05, p.delta.clone(), &p.f * 1.1, &p.dvec * 0.9).unwrap();
    let analytic = score_analytic(&at, &data).unwrap().packed();
    let numeric = score_numeric(&at, &data, 1e-5).unwrap().packed();
    let score_err = (&analytic - &numeric).norm() / analytic.norm();

    let base = loglik_concentrated(&at, &data).unwrap();
    let theta: f64 = 0.8;
    let rot = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
    let rotated = ModelParams { f: &at.f * rot, ..at.clone() };
    let rot_err = rel(loglik_concentrated(&rotated, &data).unwrap(), base);
    let shift = DVector::from_fn(8, |k, _| 3.0 - k as f64);
    let mut shifted_y = data.y().clone();
    for mut row in shifted_y.row_iter_mut() {
        row += shift.transpose();
    }
    let shifted = PanelData::new(shifted_y).unwrap();
    let loc_err = rel(loglik_concentrated(&at, &shifted).unwrap(), base);

    outcome(
        woodbury < 1e-10 && score_err < 1e-5 && l_err < 1e-13 && rot_err < 1e-9 && loc_err < 1e-9,
        format!(
            "Woodbury {woodbury:.1e}, score {score_err:.1e}, L-JB^-1 {l_err:.1e}, rotation {rot_err:.1e}, location {loc_err:.1e}"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o| results.push((id, name, o));

    record(1, "bound value, homoskedastic", bound_value());
    record(2, "two-implementation equivalence", two_implementations());
    let gaussian = run_attainment(r#"{"dist": "gaussian"}"#);
    record(3, "variance attainment, Gaussian", attainment(&gaussian));
    record(4, "robustness to non-normality", robustness());
    record(5, "factor bound", factor_bound());
    record(6, "CI coverage", coverage(&gaussian));
    record(7, "Nickell-bias ordering", nickell_ordering());
    record(8, "expansion validity", expansion_validity());
    record(9, "variance formula", variance_formula());
    record(10, "efficient-score orthogonality", orthogonality());
    record(11, "smooth-limit consequences", smooth_limit_consequences());
    record(12, "numerical infrastructure", infrastructure());

    let mut failed = 0;
    for (id, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{tag}] {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.0}s)",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
