"""
Compressing worker messages
===========================

Every worker-to-master vector goes through a compressor. The unbiased ones
(rand_k, rand_quant) add variance; the greedy ones (top_k, l1_sign) add bias
but shrink the error by a fixed fraction.
"""

import numpy as np

from byzcomp.compressors import (CompressorSpec, compress, compressor_stats, decode,
                                 deserialize, measure_variance, serialize)

rng = np.random.default_rng(0)
x = rng.standard_normal(20)

# %%
# Each variant returns a message; ``decode`` turns it back into a dense vector.
for spec in (CompressorSpec(), CompressorSpec("rand_k", k=2), CompressorSpec("top_k", k=2),
             CompressorSpec("l1_sign"), CompressorSpec("rand_quant", levels=4)):
    msg = compress(spec, x, rng)
    err = np.linalg.norm(decode(msg) - x) ** 2 / np.linalg.norm(x) ** 2
    print(f"{spec.variant:10s} kind={msg.kind:9s} bytes={msg.byte_cost:4d}  rel. error {err:.3f}")

# %%
# rand_k is unbiased with relative variance p/k - 1; the empirical value
# over many draws matches it for equal-magnitude inputs.
spec = CompressorSpec("rand_k", k=2)
bias, mse = measure_variance(spec, np.ones(20), 20_000, rng)
print("delta closed form", compressor_stats(spec, 20).delta, "measured", round(mse, 3),
      "bias", round(bias, 4))

# %%
# Messages have a byte-exact wire format. The 9-byte header is not counted
# in ``byte_cost``, which only models the payload.
msg = compress(CompressorSpec("top_k", k=3), x)
wire = serialize(msg)
print(len(wire), "bytes on the wire,", msg.byte_cost, "counted")
assert np.array_equal(decode(deserialize(wire)), decode(msg))
