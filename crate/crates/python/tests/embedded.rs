use std::ffi::CString;

use panelqmle::panelqmle;
use pyo3::prelude::*;

fn with_module<R>(f: impl FnOnce(Python<'_>) -> R) -> R {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(panelqmle);
        Python::initialize();
    });
    Python::attach(f)
}

fn run(code: &str) -> PyResult<()> {
    with_module(|py| {
        let code = CString::new(code).unwrap();
        py.run(&code, None, None)
    })
}

#[test]
fn simulate_estimate_and_bound_from_python() {
    run(r#"
import panelqmle
design = {"N": 200, "T": 6, "r": 1, "alpha": 0.5,
          "factors": [{"kind": "constant", "value": 1.0}],
          "sigma2": {"kind": "constant", "value": 1.0}, "seed": 3}
panel, truth = panelqmle.simulate(design)
assert (panel.n, panel.t) == (200, 6)
assert len(truth["eps"]) == 200 and len(truth["eps"][0]) == 6
fit = panelqmle.estimate_qmle(panel, 1)
assert fit.converged and abs(fit.alpha - 0.5) < 5 * fit.se_alpha
assert repr(fit).startswith("Fit(alpha=")
b = panelqmle.efficiency_bound(0.5, [[1.0]] * 500, [1.0] * 500)
assert abs(b["bound_alpha_ellinf"] - 0.75) < 0.0075
"#)
    .unwrap();
}

#[test]
fn errors_map_to_python_exceptions() {
    run(r#"
import panelqmle
try:
    panelqmle.Panel([[1.0, 2.0], [3.0]])
    raise AssertionError("ragged rows accepted")
except ValueError:
    pass
try:
    panelqmle.gamma_t(1.0, [1.0, 1.0])
    raise AssertionError("unit root accepted")
except ValueError:
    pass
assert issubclass(panelqmle.PanelQmleError, Exception)
"#)
    .unwrap();
}
