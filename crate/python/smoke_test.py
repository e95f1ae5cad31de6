"""Quick check of the codeq_py extension. Build it first with
`maturin develop -m crates/python/Cargo.toml` (or install the built wheel)."""

import codeq_py as cq

w = [0.02, -0.05, 0.4, -0.9, 1.3, 0.0]
r = cq.quantile_abs(w, 1.0)
d = 0.2
s = cq.pruning_aware_scale(r, d, 4)
w_hat, w_bar = cq.deadzone_quantize(w, s, d, 4)
print("step", s, "levels", w_bar)
assert cq.equivalence_oracle(w, s, d, 4)
assert [v == 0.0 for v in w_hat] == [not k for k in cq.magnitude_mask(w, d / 2)]

data = cq.Dataset.blobs(300, 8, 3, 0.2, 0)
val, train = data.split(60, 1)
model = cq.Model.mlp(8, [16], 3, 0)
model.set_fixed(4)
history = cq.train(model, train, val, epochs=3, lr_weights=0.2, lr_theta=0.2, lambda_dz=0.01)
acc = cq.evaluate(model, val)
report = model.report(acc)
print(f"accuracy {acc:.3f}  sparsity {report['overall_sparsity']:.3f}  relative BOPs {report['relative_bops']:.4f}")
assert len(history) == 3

verify = cq.run_verify(0, 50)
assert verify["passed"], verify
print("smoke test ok")
