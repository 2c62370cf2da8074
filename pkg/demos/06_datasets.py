"""
Datasets
========

Synthetic logistic-regression instances, and LibSVM files such as COVTYPE.
"""

import tempfile
from pathlib import Path

import numpy as np

from byzcomp import objective as ob

# %%
# A synthetic instance: labels from a hidden linear model, flipped with
# probability growing with ``noise``.
data = ob.generate_synthetic(seed=0, R=4, J=50, p=5, noise=0.5)
obj = ob.Objective(data, reg=0.01)
x_star, f_star = ob.solve_reference(obj)
print("f* =", f_star, " ||grad f(x*)|| =", np.linalg.norm(ob.full_grad(obj, x_star)))
print(ob.estimate_constants(obj, x_star))

# %%
# LibSVM round trip. Multi-class labels are binarized: listed classes map to +1.
path = Path(tempfile.mkdtemp()) / "tiny.libsvm"
rng = np.random.default_rng(0)
A = rng.standard_normal((40, 3))
labels = rng.integers(1, 3, size=40)
ob.write_libsvm(path, A, labels)
print(path.read_text().splitlines()[0])
ds = ob.load_libsvm(path, R=4, seed=0, positive=(2,))
print("workers", ds.R, "samples per worker", ds.J, "dim", ds.p)
