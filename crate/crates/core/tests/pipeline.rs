//! End-to-end checks through the public API: simulate, estimate, bound and
//! expand the likelihood ratio on the same replications.

use panelqmle_core::efficiency::{gamma_t_closed, gamma_t_trace, EfficiencyReport};
use panelqmle_core::estimation::{estimate_fixed_effects, estimate_qmle, EstimationOptions};
use panelqmle_core::likelihood::{loglik_concentrated, score_analytic, ModelParams, PanelData};
use panelqmle_core::local_expansion::{delta_terms, lr_decomposition, lr_exact, Mode, PerturbationSpec};
use panelqmle_core::simulation::{
    mc_estimation, simulate_panel, simulate_replication, DgpConfig, EstimatorChoice, SeriesSpec,
};
use panelqmle_core::{DMatrix, DVector, PanelError};
use proptest::prelude::*;

fn design(n: usize, t: usize, seed: u64) -> DgpConfig {
    serde_json::from_value(serde_json::json!({
        "N": n, "T": t, "r": 1, "alpha": 0.4,
        "factors": [{"kind": "sine", "offset": 1.0, "amplitude": 0.5, "cycles": 1.0, "phase": 0.3}],
        "sigma2": {"kind": "linear", "intercept": 0.8, "slope": 0.6},
        "seed": seed
    }))
    .unwrap()
}

#[test]
fn qmle_beats_truth_and_has_zero_score() {
    let (data, truth) = simulate_panel(&design(500, 6, 1)).unwrap();
    let fit = estimate_qmle(&data, 1, &EstimationOptions::default()).unwrap();
    assert!(fit.converged);
    let at_truth = loglik_concentrated(&truth.params, &data).unwrap();
    assert!(fit.loglik >= at_truth - 1e-8, "{} < {at_truth}", fit.loglik);
    assert!((fit.params.alpha - 0.4).abs() < 5.0 * fit.se_alpha);
    let score = score_analytic(&fit.params, &data).unwrap().packed();
    assert!(score.amax() < 1e-4 * data.n() as f64, "{}", score.amax());
}

#[test]
fn estimates_are_invariant_to_negating_the_panel() {
    // -y follows the same model with delta, loadings and shocks negated.
    let (data, _) = simulate_panel(&design(200, 5, 2)).unwrap();
    let negated = PanelData::new(-data.y()).unwrap();
    let opts = EstimationOptions::default();
    let a = estimate_qmle(&data, 1, &opts).unwrap();
    let b = estimate_qmle(&negated, 1, &opts).unwrap();
    assert!((a.params.alpha - b.params.alpha).abs() < 1e-6);
    assert!((a.loglik - b.loglik).abs() < 1e-6 * a.loglik.abs());
    assert!((&a.params.dvec - &b.params.dvec).amax() < 1e-5);
    assert!((&a.params.delta + &b.params.delta).amax() < 1e-5);
}

#[test]
fn replications_are_reproducible_and_distinct() {
    let config = design(20, 4, 9);
    let (a, _) = simulate_replication(&config, 3).unwrap();
    let (b, _) = simulate_replication(&config, 3).unwrap();
    let (c, _) = simulate_replication(&config, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn fixed_effects_is_biased_down_at_short_t() {
    let config: DgpConfig = serde_json::from_value(serde_json::json!({
        "N": 400, "T": 6, "r": 1, "alpha": 0.5,
        "factors": [{"kind": "constant", "value": 1.0}],
        "sigma2": {"kind": "constant", "value": 1.0}, "seed": 4
    }))
    .unwrap();
    let (data, _) = simulate_panel(&config).unwrap();
    let fe = estimate_fixed_effects(&data, 1, &EstimationOptions::default()).unwrap();
    let qmle = estimate_qmle(&data, 1, &EstimationOptions::default()).unwrap();
    assert!(fe.alpha < 0.4, "fe alpha {}", fe.alpha);
    assert!((qmle.params.alpha - 0.5).abs() < (fe.alpha - 0.5).abs());
}

#[test]
fn mc_summary_is_consistent_with_its_rows() {
    let summary =
        mc_estimation(&design(80, 5, 11), 50, EstimatorChoice::Qmle, &EstimationOptions::default()).unwrap();
    assert_eq!(summary.rows.len(), 50);
    assert!((0.0..=1.0).contains(&summary.coverage_95));
    let mean = summary.alpha_hats.iter().sum::<f64>() / summary.alpha_hats.len() as f64;
    assert!((summary.bias - (mean - 0.4)).abs() < 1e-12);
    let sigma2 = SeriesSpec::Linear {
        intercept: 0.8,
        slope: 0.6,
    }
    .evaluate(5)
    .unwrap();
    assert_eq!(summary.factor_bound.len(), 5);
    // Period one carries the pre-sample adjustment; later periods are as configured.
    for t in 1..5 {
        assert!((summary.factor_bound[t] - sigma2[t]).abs() < 1e-12);
    }
    assert!((summary.bound_alpha * summary.gamma_t - 1.0).abs() < 1e-12);
}

#[test]
fn expansion_terms_share_one_replication() {
    let config = design(150, 6, 21);
    let (data, truth) = simulate_panel(&config).unwrap();
    for mode in Mode::ALL {
        let ftilde = if mode == Mode::SmoothC {
            // D^{-1}-orthogonal to the factor: zero perturbation of F.
            vec![SeriesSpec::Constant { value: 0.0 }]
        } else {
            vec![SeriesSpec::Constant { value: 1.0 }]
        };
        let pert = PerturbationSpec {
            atilde: 0.7,
            ftilde,
            mode,
        }
        .resolve(6)
        .unwrap();
        let lr = lr_exact(&pert, &truth, &data).unwrap();
        assert!((lr_decomposition(&pert, &truth, &data).unwrap().total() - lr).abs() < 1e-8);
        let terms = delta_terms(&pert, &truth).unwrap();
        assert!((terms.lr_exact - lr).abs() < 1e-8);
        assert!((terms.residual - (lr - terms.delta() + 0.5 * terms.variance_formula)).abs() < 1e-10);
    }
}

#[test]
fn bound_report_rejects_unit_root_and_empty_factors() {
    let f = DMatrix::from_element(10, 1, 1.0);
    let d = DVector::from_element(10, 1.0);
    assert!(matches!(EfficiencyReport::compute(1.0, &f, &d), Err(PanelError::InvalidInput(_))));
    assert!(EfficiencyReport::compute(0.3, &DMatrix::zeros(10, 0), &d).is_err());
    let params = ModelParams::new(0.3, DVector::zeros(10), f, d);
    assert!(params.is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_closed_form_matches_trace(
        alpha in -0.95f64..0.95,
        sigma2 in proptest::collection::vec(0.1f64..5.0, 2..40),
    ) {
        let d = DVector::from_vec(sigma2);
        let closed = gamma_t_closed(alpha, &d).unwrap();
        let trace = gamma_t_trace(alpha, &d).unwrap();
        prop_assert!((closed - trace).abs() <= 1e-10 * closed.abs().max(1.0));
    }

    #[test]
    fn bounds_are_reciprocals(alpha in -0.9f64..0.9, level in 0.2f64..3.0, t in 3usize..30) {
        let f = DMatrix::from_fn(t, 1, |i, _| 1.0 + (i as f64 / t as f64));
        let d = DVector::from_element(t, level);
        let r = EfficiencyReport::compute(alpha, &f, &d).unwrap();
        prop_assert!((r.bound_alpha_ellinf * r.gamma_t - 1.0).abs() < 1e-12);
        prop_assert!((r.bound_alpha_ell2 * (r.gamma_t + r.nu_t) - 1.0).abs() < 1e-12);
        prop_assert!(r.bound_alpha_ell2 <= r.bound_alpha_ellinf);
        prop_assert!(r.factor_bounds.iter().all(|&b| (b - level).abs() < 1e-12));
    }
}
