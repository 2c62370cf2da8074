"""
Training under attack
=====================

Fourteen workers, four of them Byzantine. Plain SGD averages whatever it
receives; BROADCAST combines SAGA, gradient-difference compression and the
geometric median.
"""

import numpy as np

from byzcomp import objective as ob
from byzcomp.compressors import CompressorSpec
from byzcomp.engine import AlgorithmSpec, Topology, plateau_estimate, run
from byzcomp.workers import AttackSpec

obj = ob.Objective(ob.generate_synthetic(0, R=10, J=200, p=20, noise=0.5), reg=0.01)
_, f_star = ob.solve_reference(obj)
top = Topology(W=14, R=10, B=4)
rand2 = CompressorSpec("rand_k", k=2)

algorithms = [
    AlgorithmSpec("plain_sgd", T=3000),
    AlgorithmSpec("br_compressed_sgd", T=3000, compressor=rand2),
    AlgorithmSpec("br_compressed_saga", T=3000),
    AlgorithmSpec("broadcast", beta=0.1, T=3000, compressor=rand2,
                  byzantine_follows_protocol=True),
]

# %%
# Plateau of the optimality gap for each algorithm and attack.
for attack in ("gaussian", "sign_flip", "zero_grad"):
    row = []
    for alg in algorithms:
        tr = run(alg, obj, top, AttackSpec(attack), seed=0, f_star=f_star, stride=10)
        row.append(f"{alg.method}={plateau_estimate(tr):.2e}")
    print(f"{attack:9s}", "  ".join(row))

# %%
# The zero-gradient attack cancels the average exactly, so plain SGD never moves.
tr = run(AlgorithmSpec("plain_sgd", T=200), obj, top, AttackSpec("zero_grad"), f_star=f_star,
         record_iterates=True)
print("plain SGD moved by", np.abs(np.array(tr.iterates)).max())

# %%
# Compressed messages are cheaper: rand_k with k = p/10 costs 12 bytes per
# kept coordinate against 8 bytes per coordinate dense.
dense = run(AlgorithmSpec("plain_sgd", T=100), obj, top, AttackSpec("gaussian"), f_star=f_star)
sparse = run(AlgorithmSpec("br_compressed_sgd", T=100, compressor=rand2), obj, top,
             AttackSpec("gaussian"), f_star=f_star)
print("uplink bytes", dense.uplink_bytes[-1], "vs", sparse.uplink_bytes[-1])
