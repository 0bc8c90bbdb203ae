//! One function per subcommand. Each reads its inputs, runs the core routine
//! and writes its artifacts plus `manifest.json` into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use panelqmle_core::efficiency::EfficiencyReport;
use panelqmle_core::estimation::{estimate_factors_se, estimate_qmle, EstimationOptions};
use panelqmle_core::likelihood::PanelData;
use panelqmle_core::local_expansion::{residual_ladder, Mode, PerturbationSpec};
use panelqmle_core::simulation::{
    compare_fe_qmle, mc_estimation, simulate_panel, DgpConfig, EstimatorChoice, SeriesSpec,
};
use panelqmle_core::{DMatrix, PanelError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::output::{fmt_f64, matrix_rows, OutDir, RunManifest};

pub const SEED_ENV: &str = "PANELQMLE_SEED";

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration types serialize")
}

/// Command-line seed, then `PANELQMLE_SEED`, then the configuration file.
pub fn resolve_seed(cli: Option<u64>, env: Option<&str>, config: u64) -> Result<(u64, &'static str), CliError> {
    if let Some(s) = cli {
        return Ok((s, "command_line"));
    }
    if let Some(raw) = env {
        let seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned 64-bit integer")))?;
        return Ok((seed, "environment"));
    }
    Ok((config, "config"))
}

fn seeded(mut config: DgpConfig, cli: Option<u64>) -> Result<(DgpConfig, &'static str), CliError> {
    let env = std::env::var(SEED_ENV).ok();
    let (seed, source) = resolve_seed(cli, env.as_deref(), config.seed)?;
    config.seed = seed;
    config.validate()?;
    Ok((config, source))
}

fn manifest(command: &'static str, config_path: Option<&Path>, config: serde_json::Value, common: &Common) -> RunManifest {
    RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        config_path: config_path.map(|p| p.display().to_string()),
        data_path: None,
        config,
        output_dir: String::new(),
        seed: None,
        seed_source: None,
        jobs: common.jobs,
        artifacts: Vec::new(),
    }
}

fn float_row(values: impl IntoIterator<Item = f64>) -> Vec<String> {
    values.into_iter().map(fmt_f64).collect()
}

fn panel_header(t: usize) -> Vec<String> {
    (1..=t).map(|k| format!("t{k}")).collect()
}

#[derive(Debug, Serialize)]
struct TruthFile {
    replication: u64,
    seed: u64,
    alpha: f64,
    /// Effective period-one values; see `nominal_*` for the configured ones.
    delta: Vec<f64>,
    f: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    nominal_delta1: f64,
    nominal_sigma2_1: f64,
    lambda: Vec<Vec<f64>>,
    eps: Vec<Vec<f64>>,
}

pub fn simulate(config_path: &Path, common: &Common) -> Result<PathBuf, CliError> {
    let (config, source) = seeded(read_json(config_path)?, common.seed)?;
    let (data, truth) = simulate_panel(&config)?;
    let mut out = OutDir::create(&common.out)?;
    let rows: Vec<Vec<String>> = data.y().row_iter().map(|r| float_row(r.iter().copied())).collect();
    out.write_csv("panel.csv", &panel_header(data.t()), &rows)?;
    let p = &truth.params;
    out.write_json(
        "truth.json",
        &TruthFile {
            replication: truth.replication,
            seed: truth.seed,
            alpha: p.alpha,
            delta: p.delta.iter().copied().collect(),
            f: matrix_rows(&p.f),
            sigma2: p.dvec.iter().copied().collect(),
            nominal_delta1: truth.nominal_delta1,
            nominal_sigma2_1: truth.nominal_sigma2_1,
            lambda: matrix_rows(&truth.lambda),
            eps: matrix_rows(&truth.eps),
        },
    )?;
    let mut m = manifest("simulate", Some(config_path), to_value(&config), common);
    m.seed = Some(config.seed);
    m.seed_source = Some(source);
    out.finish(m)
}

/// Reads an `N x T` panel with a header row.
pub fn read_panel(path: &Path) -> Result<PanelData, CliError> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("row {}: {field:?} is not a number", k + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(PanelData::from_rows(&rows)?)
}

#[derive(Debug, Serialize)]
struct Convergence {
    converged: bool,
    iterations: usize,
    sweeps: usize,
    grad_norm: f64,
    init_loglik: f64,
}

#[derive(Debug, Serialize)]
struct FitReport {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    r: usize,
    alpha: f64,
    se_alpha: f64,
    ci95: [f64; 2],
    delta: Vec<f64>,
    f: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    factor_se: Vec<f64>,
    loglik: f64,
    convergence: Convergence,
    /// Absent when the estimate lies outside the stationary region.
    gamma_t: Option<f64>,
    nu_t: Option<f64>,
    bound_alpha: Option<f64>,
    bound_alpha_ell2: Option<f64>,
}

pub fn estimate(data_path: &Path, r: usize, options: Option<&Path>, common: &Common) -> Result<PathBuf, CliError> {
    let data = read_panel(data_path)?;
    let opts: EstimationOptions = match options {
        Some(p) => read_json(p)?,
        None => EstimationOptions::default(),
    };
    let fit = estimate_qmle(&data, r, &opts)?;
    let p = &fit.params;
    let bounds = EfficiencyReport::compute(p.alpha, &p.f, &p.dvec).ok();
    let report = FitReport {
        n: data.n(),
        t: data.t(),
        r,
        alpha: p.alpha,
        se_alpha: fit.se_alpha,
        ci95: [p.alpha - 1.96 * fit.se_alpha, p.alpha + 1.96 * fit.se_alpha],
        delta: p.delta.iter().copied().collect(),
        f: matrix_rows(&p.f),
        sigma2: p.dvec.iter().copied().collect(),
        factor_se: estimate_factors_se(&fit),
        loglik: fit.loglik,
        convergence: Convergence {
            converged: fit.converged,
            iterations: fit.iterations,
            sweeps: fit.sweeps,
            grad_norm: fit.grad_norm,
            init_loglik: fit.init_loglik,
        },
        gamma_t: bounds.as_ref().map(|b| b.gamma_t),
        nu_t: bounds.as_ref().map(|b| b.nu_t),
        bound_alpha: bounds.as_ref().map(|b| b.bound_alpha_ellinf),
        bound_alpha_ell2: bounds.as_ref().map(|b| b.bound_alpha_ell2),
    };
    let mut out = OutDir::create(&common.out)?;
    out.write_json("fit.json", &report)?;
    let mut m = manifest(
        "estimate",
        options,
        serde_json::json!({ "r": r, "options": to_value(&opts) }),
        common,
    );
    m.data_path = Some(data_path.display().to_string());
    out.finish(m)?;
    if !fit.converged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} iterations with score sup-norm {:.3e}; see {}",
            fit.iterations,
            fit.grad_norm,
            common.out.join("fit.json").display()
        )));
    }
    Ok(common.out.join("fit.json"))
}

pub fn mc(config_path: &Path, reps: usize, estimator: EstimatorChoice, common: &Common) -> Result<PathBuf, CliError> {
    let (config, source) = seeded(read_json(config_path)?, common.seed)?;
    let summary = mc_estimation(&config, reps, estimator, &EstimationOptions::default())?;
    let mut out = OutDir::create(&common.out)?;

    let header: Vec<String> = ["replication", "alpha_hat", "se", "converged", "iterations", "error"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.replication.to_string(),
                fmt_f64(r.alpha_hat),
                fmt_f64(r.se),
                r.converged.to_string(),
                r.iterations.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    out.write_csv("replications.csv", &header, &rows)?;

    let factor_rows: Vec<Vec<String>> = summary
        .factor_var_scaled
        .iter()
        .zip(&summary.factor_bound)
        .enumerate()
        .map(|(k, (v, b))| vec![(k + 1).to_string(), fmt_f64(*v), fmt_f64(*b)])
        .collect();
    out.write_csv(
        "factor_variance.csv",
        &["t", "factor_var_scaled", "factor_bound"].map(String::from),
        &factor_rows,
    )?;

    let mut json = to_value(&summary);
    if let Some(obj) = json.as_object_mut() {
        obj.remove("rows");
    }
    out.write_json("summary.json", &json)?;

    let mut m = manifest(
        "mc",
        Some(config_path),
        serde_json::json!({ "dgp": to_value(&config), "reps": reps, "estimator": estimator }),
        common,
    );
    m.seed = Some(config.seed);
    m.seed_source = Some(source);
    out.finish(m)?;
    if !summary.valid {
        return Err(CliError::NotConverged(format!(
            "{} failed and {} non-converged replications out of {reps}",
            summary.errors, summary.failures
        )));
    }
    Ok(common.out.join("summary.json"))
}

/// `(alpha, F, D)` for the bound calculator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    #[serde(rename = "T")]
    pub t: usize,
    pub alpha: f64,
    pub factors: Vec<SeriesSpec>,
    pub sigma2: SeriesSpec,
}

#[derive(Debug, Serialize)]
struct BoundReport {
    #[serde(rename = "T")]
    t: usize,
    alpha: f64,
    #[serde(flatten)]
    report: EfficiencyReport,
}

pub fn bound(config_path: &Path, common: &Common) -> Result<(PathBuf, String), CliError> {
    let spec: BoundSpec = read_json(config_path)?;
    let dvec = spec.sigma2.evaluate(spec.t)?;
    let mut f = DMatrix::zeros(spec.t, spec.factors.len());
    for (k, s) in spec.factors.iter().enumerate() {
        f.set_column(k, &s.evaluate(spec.t)?);
    }
    let report = EfficiencyReport::compute(spec.alpha, &f, &dvec)?;
    let text = format!(
        "gamma_T = {:.10}\nnu_T = {:.10}\nbound_alpha (1/gamma_T) = {:.10}\nbound_alpha_ell2 (1/(gamma_T+nu_T)) = {:.10}",
        report.gamma_t, report.nu_t, report.bound_alpha_ellinf, report.bound_alpha_ell2
    );
    let mut out = OutDir::create(&common.out)?;
    let rows: Vec<Vec<String>> = report
        .factor_bounds
        .iter()
        .enumerate()
        .map(|(k, b)| vec![(k + 1).to_string(), fmt_f64(*b)])
        .collect();
    out.write_csv("factor_bounds.csv", &["t", "factor_bound"].map(String::from), &rows)?;
    out.write_json(
        "bound.json",
        &BoundReport {
            t: spec.t,
            alpha: spec.alpha,
            report,
        },
    )?;
    out.finish(manifest("bound", Some(config_path), to_value(&spec), common))?;
    Ok((common.out.join("bound.json"), text))
}

fn default_ladder() -> Vec<(usize, usize)> {
    vec![(100, 10), (400, 20), (1600, 40)]
}

/// Design, perturbation and `(N, T)` ladder for `lr-check`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrCheckConfig {
    pub dgp: DgpConfig,
    pub atilde: f64,
    pub ftilde: Vec<SeriesSpec>,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<(usize, usize)>,
}

pub fn lr_check(config_path: &Path, reps: usize, mode: Option<Mode>, common: &Common) -> Result<PathBuf, CliError> {
    let mut cfg: LrCheckConfig = read_json(config_path)?;
    let (dgp, source) = seeded(cfg.dgp.clone(), common.seed)?;
    cfg.dgp = dgp;
    let mode = mode.or(cfg.mode).unwrap_or(Mode::EllInfinity);
    cfg.mode = Some(mode);
    let pert = PerturbationSpec {
        atilde: cfg.atilde,
        ftilde: cfg.ftilde.clone(),
        mode,
    };
    let report = residual_ladder(&cfg.dgp, &cfg.ladder, &pert, reps)?;
    let mut out = OutDir::create(&common.out)?;
    let header: Vec<String> = [
        "N",
        "T",
        "reps",
        "median_abs_residual",
        "mean_residual",
        "median_abs_lr",
        "variance_formula",
        "n_over_t3",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.n.to_string(), r.t.to_string(), r.reps.to_string()];
            row.extend(float_row([
                r.median_abs_residual,
                r.mean_residual,
                r.median_abs_lr,
                r.variance_formula,
                r.regime,
            ]));
            row
        })
        .collect();
    out.write_csv("ladder.csv", &header, &rows)?;
    out.write_json("lr_check.json", &report)?;
    let mut m = manifest(
        "lr-check",
        Some(config_path),
        serde_json::json!({ "check": to_value(&cfg), "reps": reps }),
        common,
    );
    m.seed = Some(cfg.dgp.seed);
    m.seed_source = Some(source);
    out.finish(m)?;
    if !report.monotone {
        log::warn!("median residuals are not monotone along the ladder");
    }
    Ok(common.out.join("lr_check.json"))
}

pub fn compare_fe(config_path: &Path, reps: usize, common: &Common) -> Result<PathBuf, CliError> {
    let (config, source) = seeded(read_json(config_path)?, common.seed)?;
    let grid = [config.t, 2 * config.t];
    let cmp = compare_fe_qmle(&config, reps, &grid, &EstimationOptions::default())?;
    let mut out = OutDir::create(&common.out)?;
    let rows: Vec<Vec<String>> = cmp
        .rows
        .iter()
        .map(|r| vec![r.replication.to_string(), fmt_f64(r.alpha_qmle), fmt_f64(r.alpha_fe)])
        .collect();
    out.write_csv(
        "pairs.csv",
        &["replication", "alpha_qmle", "alpha_fe"].map(String::from),
        &rows,
    )?;
    let profile: Vec<Vec<String>> = cmp
        .fe_profile
        .iter()
        .map(|b| vec![b.t.to_string(), fmt_f64(b.bias_fe), fmt_f64(b.bias_fe_mcse)])
        .collect();
    out.write_csv("fe_profile.csv", &["T", "bias_fe", "bias_fe_mcse"].map(String::from), &profile)?;
    let mut json = to_value(&cmp);
    if let Some(obj) = json.as_object_mut() {
        obj.remove("rows");
    }
    out.write_json("comparison.json", &json)?;
    let mut m = manifest(
        "compare-fe",
        Some(config_path),
        serde_json::json!({ "dgp": to_value(&config), "reps": reps, "t_grid": grid }),
        common,
    );
    m.seed = Some(config.seed);
    m.seed_source = Some(source);
    out.finish(m)?;
    if !cmp.valid {
        return Err(CliError::Panel(PanelError::Degenerate(format!(
            "{} of {reps} paired replications failed",
            cmp.errors
        ))));
    }
    Ok(common.out.join("comparison.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), 3).unwrap(), (1, "command_line"));
        assert_eq!(resolve_seed(None, Some(" 2 "), 3).unwrap(), (2, "environment"));
        assert_eq!(resolve_seed(None, None, 3).unwrap(), (3, "config"));
        assert_eq!(resolve_seed(None, Some("-4"), 3).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn panel_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "t1,t2,t3\n1.5,2,3\n4,5,6e-1\n").unwrap();
        let data = read_panel(&path).unwrap();
        assert_eq!((data.n(), data.t()), (2, 3));
        assert_eq!(data.y()[(1, 2)], 0.6);
    }

    #[test]
    fn ragged_or_text_panels_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "t1,t2\n1,x\n").unwrap();
        assert_eq!(read_panel(&path).unwrap_err().exit_code(), 2);
        std::fs::write(&path, "t1,t2\n1,2\n3\n").unwrap();
        assert_eq!(read_panel(&path).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn lr_check_config_defaults() {
        let cfg: LrCheckConfig = serde_json::from_str(
            r#"{"dgp": {"N": 10, "T": 4, "r": 1, "alpha": 0.5,
                        "factors": [{"kind": "constant", "value": 1.0}],
                        "sigma2": {"kind": "constant", "value": 1.0}, "seed": 1},
                "atilde": 1.0, "ftilde": [{"kind": "constant", "value": 0.0}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.ladder, default_ladder());
        assert_eq!(cfg.mode, None);
    }

    #[test]
    fn bound_matches_homoskedastic_limit() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bound.json");
        std::fs::write(
            &cfg,
            r#"{"T": 500, "alpha": 0.5, "factors": [{"kind": "constant", "value": 1.0}],
                "sigma2": {"kind": "constant", "value": 1.0}}"#,
        )
        .unwrap();
        let common = Common {
            out: dir.path().join("out"),
            ..Common::default()
        };
        let (path, text) = bound(&cfg, &common).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert!((v["bound_alpha_ellinf"].as_f64().unwrap() - 0.75).abs() < 0.0075);
        assert!(text.contains("gamma_T"));
        assert!(dir.path().join("out/manifest.json").exists());
    }
}
