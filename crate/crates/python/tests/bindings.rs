use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(codeq_py);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("cq", py.import("codeq_py").unwrap()).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python check failed");
        }
    });
}

use codeq_py::codeq_py;

#[test]
fn bindings() {
    run(c"
w = [0.0, 0.1, -0.3, 0.5, 1.0, -1.0]
s = cq.pruning_aware_scale(1.0, 0.4, 3)
w_hat, w_bar = cq.deadzone_quantize(w, s, 0.4, 3)
assert w_bar[:2] == [0, 0] and w_hat[:2] == [0.0, 0.0], w_bar
assert max(abs(v) for v in w_bar) <= cq.qmax(3)
assert cq.magnitude_mask(w, 0.2) == [False, False, True, True, True, True]
assert cq.equivalence_oracle(w, s, 0.4, 3)
assert abs(cq.absmax_recovery_fixed_point(3.0, 3) - 1.0) < 1e-12
assert cq.quantile_abs([1.0, -4.0, 2.0], 1.0) == 4.0
assert cq.linear_bops(10, 5, 0.5, 4) == 0.5 * 50 * 4 * 32
assert cq.conv_bops(16, 16, 3, 8, 8, 0.25, 4) == 4718592

try:
    cq.deadzone_quantize(w, s, 0.4, 1)
    raise AssertionError('expected ValueError')
except ValueError:
    pass
try:
    cq.Model.load('/nonexistent/model.cdq')
    raise AssertionError('expected OSError')
except OSError:
    pass

data = cq.Dataset.blobs(200, 6, 3, 0.1, 1)
val, tr = data.split(50, 0)
assert len(val) == 50 and len(tr) == 150 and tr.num_classes == 3
model = cq.Model.mlp(6, [8], 3, 0)
model.set_fixed(4)
hist = cq.train(model, tr, val, epochs=2, batch_size=32, lr_weights=0.2, lr_theta=0.2)
assert len(hist) == 2 and isinstance(hist[0], dict)
acc = cq.evaluate(model, val)
assert 0.0 <= acc <= 1.0
rep = model.report(acc)
assert 0.0 <= rep['overall_sparsity'] <= 1.0 and rep['accuracy'] == acc
assert len(model.predict(val.features[:12], 2)) == 6
assert [st[1] for st in model.quant_states()] == [4, 4]

mixed = cq.Model.mlp(6, [8], 3, 0)
mixed.set_mixed(0.0, 3.0, 2, 8)
assert [st[1] for st in mixed.quant_states()] == [2, 2]

ds = cq.Dataset([0.0, 1.0, 2.0, 3.0], [2], [0, 1])
assert len(ds) == 2 and ds.num_classes == 2

r = cq.run_verify(0, 20)
assert r['passed'] is True
");
}
