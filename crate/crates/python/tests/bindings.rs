// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Runs `code` with the module bound to `m` and a scratch directory in `tmp`.
fn run(code: &str) {
    Python::initialize();
    let tmp = tempfile::tempdir().unwrap();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(cotsteer_py::cotsteer_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("m", m).unwrap();
        locals.set_item("tmp", tmp.path().to_str().unwrap()).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, Some(&locals)) {
            e.display(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn probe_gradient_matches_finite_differences() {
    run(r#"
p = m.Probe.random(6, 8, seed=3)
h = [0.1 * i - 0.2 for i in range(6)]
g = p.input_gradient(h)
import math
for i in range(6):
    e = 1e-6
    hp = list(h); hp[i] += e
    hm = list(h); hm[i] -= e
    fd = (math.log(p.forward(hp)) - math.log(p.forward(hm))) / (2 * e)
    assert abs(fd - g[i]) <= 1e-5 * max(1.0, abs(fd)), (i, fd, g[i])
assert p.input_dim == 6 and p.hidden_width == 8
"#);
}

#[test]
fn optimizer_reaches_target_and_reports_trace() {
    run(r#"
p = m.Probe.linear([4.0, 0.0, 0.0, 0.0], 0.0)
cfg = m.OptimizerConfig(tau=0.9, lambda_=0.0, noise=False)
out = m.optimize_hidden_state(p, [-1.0, 0.0, 0.0, 0.0], cfg)
assert out["converged"], out["iterations"]
assert p.forward(out["h_star"]) >= 0.9
assert len(out["trace"]) == out["iterations"]
assert {"f", "distance", "cosine", "in_bounds"} <= set(out["trace"][0])
again = m.optimize_hidden_state(p, [-1.0, 0.0, 0.0, 0.0], cfg)
assert again["h_star"] == out["h_star"]
try:
    m.OptimizerConfig(tua=0.5)
    raise AssertionError("unknown option accepted")
except ValueError:
    pass
"#);
}

#[test]
fn bounds_and_objective_gradient() {
    run(r#"
assert abs(m.lemma1_upper_bound([1.0, 0.0], [1.0, 0.0], 0.1) - 0.05) < 1e-12
assert m.lemma1_upper_bound([1.0, 0.0], [-1.0, 0.0], 0.1) is None
lb = m.lemma2_lower_bound([1.0, 0.0], [0.0, 0.0], [0.5, 0.0], 1.0, 0.1)
assert lb >= 0.0
p = m.Probe.linear([1.0, 0.0], 0.0)
g0 = m.objective_gradient(p, [0.5, 0.5], [0.0, 0.0], 0.0)
g1 = m.objective_gradient(p, [0.5, 0.5], [0.0, 0.0], 1.0)
assert abs((g0[1] - g1[1]) - 1.0) < 1e-12
"#);
}

#[test]
fn baselines_behave_on_hand_computed_inputs() {
    run(r#"
d = m.dim_vector([[2.0, 0.0], [4.0, 0.0]], [[0.0, 0.0], [0.0, 2.0]])
assert d == [3.0, -1.0], d
v = m.pca_vector([[1.0, 0.0], [2.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]])
assert abs(abs(v[0]) - 1.0) < 1e-9 and abs(v[1]) < 1e-9
assert m.directional_ablation([3.0, 4.0], [1.0, 0.0]) == [0.0, 4.0]
x = m.svm_project([3.0, 1.0], [1.0, 0.0], -1.0)
assert abs(x[0] - 1.0) < 1e-12 and x[1] == 1.0
try:
    m.dim_vector([[1.0]], [[1.0, 2.0]])
    raise AssertionError("dimension mismatch accepted")
except ValueError:
    pass
"#);
}

#[test]
fn activation_files_round_trip_and_errors_map() {
    run(r#"
import os
path = os.path.join(tmp, "a.actrec")
recs = [
    {"layer": 1, "site": "ATTN", "label": 1, "position": 4, "values": [0.5, -1.0, 2.0]},
    {"layer": 2, "site": "INT_LAYER", "label": -1, "position": 0, "values": [0.0, 0.25, 1.0]},
]
assert m.write_records(path, "py-test", recs) == 2
tag, back = m.read_records(path)
assert tag == "py-test" and back == recs, back
s = m.validate(path)
assert s["record_count"] == 2 and s["dim"] == 3
try:
    m.read_records(os.path.join(tmp, "absent.actrec"))
    raise AssertionError
except FileNotFoundError:
    pass
with open(os.path.join(tmp, "junk.actrec"), "wb") as f:
    f.write(b"NOTREC1........")
try:
    m.validate(os.path.join(tmp, "junk.actrec"))
    raise AssertionError
except OSError as e:
    assert not isinstance(e, FileNotFoundError)
"#);
}

#[test]
fn text_metrics() {
    run(r#"
assert m.ngram_entropy(["a", "a", "a", "a"], 2) == 0.0
assert m.fluency(["a", "b", "c", "d", "e"]) > 0.0
assert m.extract_answer(["4", "+", "5", "=", "9", ";", "9"]) == 9
assert m.extract_answer(["+"]) is None
"#);
}
