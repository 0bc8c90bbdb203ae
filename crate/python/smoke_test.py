"""Smoke test for the panelqmle extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/panelqmle-*.whl
"""

import math

import panelqmle

DESIGN = {
    "N": 300,
    "T": 8,
    "r": 1,
    "alpha": 0.5,
    "factors": [{"kind": "sine", "offset": 1.0, "amplitude": 0.5, "cycles": 1.0, "phase": 0.0}],
    "sigma2": {"kind": "constant", "value": 1.0},
    "seed": 42,
}


def main():
    panel, truth = panelqmle.simulate(DESIGN)
    assert (panel.n, panel.t) == (300, 8), panel
    assert len(truth["lambda"]) == 300

    fit = panelqmle.estimate_qmle(panel, 1)
    assert fit.converged, fit
    assert abs(fit.alpha - 0.5) < 5 * fit.se_alpha, fit
    lo, hi = fit.ci95()
    assert lo < fit.alpha < hi
    assert len(fit.factor_se()) == 8
    assert fit.bounds()["gamma_t"] > 0

    ll = panelqmle.loglik(panel, fit.alpha, fit.delta, fit.f, fit.sigma2)
    assert math.isclose(ll, fit.loglik, rel_tol=1e-8, abs_tol=1e-8), (ll, fit.loglik)

    bound = panelqmle.efficiency_bound(0.5, [[1.0]] * 500, [1.0] * 500)
    assert abs(bound["bound_alpha_ellinf"] - 0.75) / 0.75 < 1e-2, bound
    assert abs(panelqmle.gamma_t(0.5, [1.0] * 500) - 4.0 / 3.0) < 1e-2

    ladder = panelqmle.lr_ladder(
        DESIGN, [(50, 5), (100, 8)], 1.0, [{"kind": "constant", "value": 1.0}], reps=10
    )
    assert len(ladder["rows"]) == 2

    try:
        panelqmle.estimate_qmle(panel, 7)
    except ValueError:
        pass
    else:
        raise AssertionError("r = 7 should be rejected")

    try:
        panelqmle.simulate({k: v for k, v in DESIGN.items() if k != "alpha"})
    except ValueError as e:
        assert "alpha" in str(e)
    else:
        raise AssertionError("missing alpha should be rejected")

    print(f"ok: {fit!r}, bound_alpha={bound['bound_alpha_ellinf']:.4f}")


if __name__ == "__main__":
    main()
