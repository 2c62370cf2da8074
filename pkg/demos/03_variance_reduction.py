"""
Removing stochastic and compression noise
=========================================

SAGA keeps a table of per-sample gradients so its estimate stops being
noisy near the optimum. Gradient-difference compression keeps a reference
vector ``h`` on both sides of the link so the compressed part shrinks too.
"""

import numpy as np

from byzcomp import objective as ob
from byzcomp.compressors import CompressorSpec
from byzcomp.workers import (WorkerState, gdc_message, init_saga_table, saga_gradient,
                             sgd_gradient)

obj = ob.Objective(ob.generate_synthetic(0, R=1, J=200, p=20, noise=0.5), reg=0.01)
x_star, _ = ob.solve_reference(obj)

# %%
# Near the optimum the plain stochastic gradient is still noisy, the SAGA one is not.
sgd = WorkerState.create(0, obj.p, seed=0)
saga = WorkerState.create(0, obj.p, seed=0)
x = x_star + 0.5
init_saga_table(saga, obj, x)
for step in range(4000):
    x = x - 0.05 * saga_gradient(saga, obj, x)
target = ob.local_grad(obj, x, 0)
noise_sgd = np.mean([np.sum((sgd_gradient(sgd, obj, x) - target) ** 2) for _ in range(500)])
noise_saga = np.mean([np.sum((saga_gradient(saga, obj, x) - target) ** 2) for _ in range(500)])
print(f"SGD noise {noise_sgd:.3e}, SAGA noise {noise_saga:.3e}")

# %%
# With rand_k (k = 2 of 20) and beta = 0.05, the vector that actually gets compressed,
# g - h, shrinks as h learns g.
w = WorkerState.create(0, obj.p, seed=1)
spec = CompressorSpec("rand_k", k=2)
g = ob.local_grad(obj, np.zeros(obj.p), 0)
for t in range(0, 201):
    if t % 40 == 0:
        print(f"t={t:3d}  ||g - h||^2 = {np.sum((g - w.h) ** 2):.3e}")
    gdc_message(w, g, spec, beta=0.05)
