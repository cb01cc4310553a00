"""
The autodiff core
=================

Everything in the package is built on a small tape-based reverse-mode
engine over float64 numpy arrays. This script records a tiny graph, pulls
gradients through it and compares them against central differences.
"""

# %%
# A tensor that requires gradients records every operation applied to it.
import numpy as np

import advcnp.diffcore as dc

w = dc.Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]), requires_grad=True)
x = np.array([[1.0, 2.0], [3.0, -1.0]])
loss = dc.sum_(dc.tanh(x @ w))
loss.backward()
print("loss", loss.item())
print("dL/dw\n", w.grad)

# %%
# ``grad_check`` perturbs each parameter entry by +/- eps and reports the
# worst relative error between analytic and numerical gradients.
mlp = dc.MLP([3, 16, 1], np.random.default_rng(0))
inputs = np.random.default_rng(1).normal(size=(8, 3))
err = dc.grad_check(lambda: dc.mean(dc.square(mlp(inputs))), mlp.parameters())
print(f"MLP max relative gradient error: {err:.2e}")

# %%
# The same check is run on the three training losses by the ``gradcheck``
# command (``python -m advcnp gradcheck``).
from advcnp.experiments import gradcheck_report

for row in gradcheck_report(seed=0):
    print(f"{row['loss']:<24s} {row['max_rel_error']:.2e}")
