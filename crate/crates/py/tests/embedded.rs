use std::ffi::CString;

use ckil_py::ckil_module;
use pyo3::prelude::*;

fn run(code: &str) -> PyResult<()> {
    Python::attach(|py| py.run(&CString::new(code).unwrap(), None, None))
}

fn init() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| pyo3::append_to_inittab!(ckil_module));
}

#[test]
fn module_round_trip() {
    init();
    run(r#"
import ckil
data = ckil.Dataset.generate("acrobot", 2, seed=4, epsilon=0.2)
assert len(data) == 2
p, t = ckil.estimate(data, h1=0.05, h2=0.05, h3=0.05)
assert len(p) == data.tuple_count()
pol = ckil.train(data, lam=0.0, batch=64, iters=50)
assert len(pol.action_probs(data.episode(1)[0][3])) == 3
assert pol.stop_reason == "max_iters"
assert ckil.preset("acrobot")["epsilon"] == 0.2
"#)
    .unwrap();
}

#[test]
fn errors_map_to_python_exceptions() {
    init();
    run(r#"
import ckil
for bad in (lambda: ckil.spec("pendulum"), lambda: ckil.Dataset.generate("cartpole", 0), lambda: ckil.step("cartpole", [0, 0, 0, 0], 5)):
    try:
        bad()
    except ValueError:
        pass
    else:
        raise AssertionError("accepted")
try:
    ckil.Dataset.load("cartpole", "/nonexistent.jsonl")
except OSError:
    pass
else:
    raise AssertionError("missing file accepted")
"#)
    .unwrap();
}
