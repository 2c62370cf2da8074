"""Master loop tying workers, compressors and aggregators together.

Each iteration runs in three phases: regular workers compute and encode
their vectors, Byzantine workers then build attacks from the full set of
regular vectors, and finally the master decodes, aggregates and steps.

Methods map to a gradient rule and a transport:

=====================  ========  =========  ===============
method                 gradient  transport  default rule
=====================  ========  =========  ===============
plain_sgd              sgd       direct     mean
plain_saga             saga      direct     mean
br_compressed_sgd      sgd       direct     geomed
br_compressed_saga     saga      direct     geomed
br_gdc_sgd             sgd       gdc        geomed
broadcast              saga      gdc        geomed
ef_sgd                 sgd       ef         geomed
ef_saga                saga      ef         geomed
signsgd                sgd       sign       sign_majority
norm_threshold_sgd     sgd       direct/ef  norm_threshold
=====================  ========  =========  ===============

"Uncompressed" variants are the same methods with the identity compressor.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import objective as ob
from .aggregators import AggregatorSpec, aggregate_detailed, geometric_median
from .compressors import CompressedMessage, CompressorSpec, compress, compressor_stats, decode
from .errors import DivergenceError, InvalidInputError
from .workers import (AttackSpec, WorkerState, byzantine_message, byzantine_vector, gdc_message,
                      ef_message, init_saga_table, saga_gradient, sgd_gradient)

log = logging.getLogger(__name__)

METHODS = {
    "plain_sgd": ("sgd", "direct", "mean"),
    "plain_saga": ("saga", "direct", "mean"),
    "br_compressed_sgd": ("sgd", "direct", "geomed"),
    "br_compressed_saga": ("saga", "direct", "geomed"),
    "br_gdc_sgd": ("sgd", "gdc", "geomed"),
    "broadcast": ("saga", "gdc", "geomed"),
    "ef_sgd": ("sgd", "ef", "geomed"),
    "ef_saga": ("saga", "ef", "geomed"),
    "signsgd": ("sgd", "sign", "sign_majority"),
    "norm_threshold_sgd": ("sgd", "direct", "norm_threshold"),
}


@dataclass(frozen=True)
class Topology:
    W: int
    R: int
    B: int

    def __post_init__(self):
        if self.R + self.B != self.W or self.R < 1 or self.B < 0:
            raise InvalidInputError(f"need R + B = W with R >= 1, B >= 0; got {self}")
        if self.B >= self.W / 2:
            log.warning("B=%d is not below W/2=%.1f; robustness guarantees do not apply",
                        self.B, self.W / 2)


@dataclass(frozen=True)
class AlgorithmSpec:
    method: str
    gamma: float = 0.01
    T: int = 1000
    beta: float | None = None
    batch: int = 1
    aggregator: AggregatorSpec | None = None
    compressor: CompressorSpec = field(default_factory=CompressorSpec)
    byzantine_compressor: CompressorSpec | None = None
    error_feedback: bool = False
    byzantine_follows_protocol: bool = False
    name: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        if not self.gamma > 0:
            raise InvalidInputError("step size must be positive")
        if self.T < 0:
            raise InvalidInputError("T must be non-negative")
        if self.batch < 1:
            raise InvalidInputError("batch size must be at least 1")
        if self.transport == "gdc":
            if self.beta is None or not self.beta >= 0:
                raise InvalidInputError(f"{self.method} needs beta >= 0")
        elif self.beta is not None:
            raise InvalidInputError(f"beta only applies to gradient-difference methods, not {self.method}")
        if self.error_feedback and self.method != "norm_threshold_sgd":
            raise InvalidInputError("error_feedback flag only applies to norm_threshold_sgd")
        if self.aggregator is None:
            object.__setattr__(self, "aggregator", AggregatorSpec(METHODS[self.method][2]))
        if self.byzantine_compressor is None:
            # attackers sparsify greedily with the regular budget
            c = self.compressor
            byz = CompressorSpec("top_k", k=c.k) if c.variant in ("rand_k", "top_k") else c
            object.__setattr__(self, "byzantine_compressor", byz)
        if self.name is None:
            object.__setattr__(self, "name", self.method)

    @property
    def gradient_rule(self) -> str:
        return METHODS[self.method][0]

    @property
    def transport(self) -> str:
        if self.method == "norm_threshold_sgd" and self.error_feedback:
            return "ef"
        return METHODS[self.method][1]


@dataclass
class Lemma1Record:
    t: int
    lhs: float
    rhs: float
    inner: float
    outer: float
    compression: float
    eps_term: float
    c_alpha: float
    delta: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


TRACE_COLUMNS = ("t", "gap", "grad_norm", "uplink_bytes", "geomed_iterations", "geomed_gap")


@dataclass
class RunTrace:
    t: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    uplink_bytes: list = field(default_factory=list)
    geomed_iterations: list = field(default_factory=list)
    geomed_gap: list = field(default_factory=list)
    lemma1: list = field(default_factory=list)
    iterates: list | None = None
    meta: dict = field(default_factory=dict)

    def append(self, t, gap, grad_norm, nbytes, gm_iters, gm_gap):
        self.t.append(t)
        self.gap.append(gap)
        self.grad_norm.append(grad_norm)
        self.uplink_bytes.append(nbytes)
        self.geomed_iterations.append(gm_iters)
        self.geomed_gap.append(gm_gap)

    def __len__(self):
        return len(self.t)

    def to_csv(self, path) -> None:
        """Header row then one row per record; floats at 17 significant digits."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in zip(*(getattr(self, c) for c in TRACE_COLUMNS)):
                w.writerow([_fmt(v) for v in row])

    @classmethod
    def from_csv(cls, path) -> RunTrace:
        tr = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            rows = csv.reader(fh)
            header = next(rows)
            if tuple(header) != TRACE_COLUMNS:
                raise InvalidInputError(f"unexpected trace header {header}")
            for row in rows:
                tr.append(int(row[0]), float(row[1]), float(row[2]), int(row[3]),
                          int(row[4]), float(row[5]))
        return tr

    def summary(self, tail_fraction: float = 0.1) -> dict:
        out = dict(self.meta)
        out.update(plateau=plateau_estimate(self, tail_fraction),
                   final_gap=self.gap[-1] if self.gap else math.nan,
                   total_bytes=self.uplink_bytes[-1] if self.uplink_bytes else 0,
                   records=len(self))
        if self.lemma1:
            out["lemma1_holds"] = all(r.holds for r in self.lemma1)
        return out

    def to_json(self, path, tail_fraction: float = 0.1) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(tail_fraction), fh, indent=2, sort_keys=True)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def plateau_estimate(trace: RunTrace, tail_fraction: float = 0.1) -> float:
    """Mean optimality gap over the last ``tail_fraction`` of the records."""
    if not 0 < tail_fraction <= 1:
        raise InvalidInputError("tail_fraction must lie in (0, 1]")
    gaps = np.asarray(trace.gap if isinstance(trace, RunTrace) else trace, dtype=np.float64)
    if gaps.size == 0:
        raise InvalidInputError("empty trace")
    n = max(1, int(math.ceil(tail_fraction * gaps.size)))
    return float(gaps[-n:].mean())


def c_alpha(W: int, B: int) -> float:
    if not B < W / 2:
        raise InvalidInputError("C_alpha needs B < W/2")
    a = B / W
    return (2 - 2 * a) / (1 - 2 * a)


def _resolve_delta(spec: CompressorSpec, p: int, delta):
    if delta is not None:
        return float(delta)
    d = compressor_stats(spec, p).delta
    if d is None:
        raise InvalidInputError(f"no closed-form delta for {spec.variant}; pass delta")
    return d


def measure_lemma1(obj: ob.Objective, x, topology: Topology, attack: AttackSpec,
                   compressor: CompressorSpec, byzantine_compressor: CompressorSpec | None = None,
                   tables=None, eps: float = 1e-5, n_draws: int = 100, rng=None,
                   delta: float | None = None, t: int = 0) -> Lemma1Record:
    """Check the geometric-median concentration bound at a frozen snapshot.

    Regular vectors are single-sample gradients at ``x`` or, when ``tables``
    holds one SAGA table per regular worker, the corrected gradients.
    Expectations over the sample index are exact (enumeration over ``J``);
    the left-hand side is a Monte-Carlo average over ``n_draws`` re-draws of
    sample indices, compression and attack noise.
    """
    W, R, B = topology.W, topology.R, topology.B
    if R != obj.dataset.R:
        raise InvalidInputError("topology R differs from the dataset")
    ca = c_alpha(W, B)
    p = obj.p
    dlt = _resolve_delta(compressor, p, delta)
    byz_spec = compressor if byzantine_compressor is None else byzantine_compressor
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    Z = np.stack([ob.worker_sample_grads(obj, x, w) for w in range(R)])
    if tables is not None:
        for w in range(R):
            tab = np.asarray(tables[w])
            Z[w] = Z[w] - tab + tab.mean(axis=0)
    EZ = Z.mean(axis=1)
    zbar = EZ.mean(axis=0)
    inner = float(np.sum((Z - EZ[:, None, :]) ** 2) / Z.shape[1])
    outer = float(np.sum((EZ - zbar) ** 2))
    second = float(np.sum(Z ** 2) / Z.shape[1])
    k2 = 2 * ca ** 2 / R
    rhs = k2 * inner + k2 * outer + k2 * dlt * second + 2 * eps ** 2 / (W - 2 * B) ** 2
    J = obj.dataset.J
    lhs = 0.0
    for _ in range(n_draws):
        zs = Z[np.arange(R), rng.integers(J, size=R)]
        msgs = [decode(compress(compressor, z, rng)) for z in zs]
        if B:
            for b in range(B):
                v = byzantine_vector(attack, zs, R, B, rng, b)
                msgs.append(decode(compress(byz_spec, v, rng)))
        gm = geometric_median(np.array(msgs), eps).point
        lhs += float(np.sum((gm - zbar) ** 2))
    lhs /= n_draws
    return Lemma1Record(t, lhs, rhs, k2 * inner, k2 * outer, k2 * dlt * second,
                        2 * eps ** 2 / (W - 2 * B) ** 2, ca, dlt)


def run(algorithm: AlgorithmSpec, obj: ob.Objective, topology: Topology, attack: AttackSpec,
        seed=0, x0=None, f_star: float | None = None, stride: int = 1, debug: bool = False,
        record_iterates: bool = False, lemma1_every: int = 0, lemma1_draws: int = 100) -> RunTrace:
    """Run ``algorithm.T`` iterations and return the metric trace.

    Raises :class:`DivergenceError` carrying the trace so far if an iterate
    becomes non-finite.
    """
    alg = algorithm
    W, R, B = topology.W, topology.R, topology.B
    if R != obj.dataset.R:
        raise InvalidInputError(f"topology has R={R} but the dataset has {obj.dataset.R} workers")
    if B > 0 and attack.kind == "none":
        raise InvalidInputError("B > 0 requires an attack")
    p = obj.p
    alg.compressor.check_dim(p)
    alg.byzantine_compressor.check_dim(p)
    transport = alg.transport
    if transport == "gdc" and alg.compressor.unbiased and alg.compressor.variant != "rand_quant":
        d = compressor_stats(alg.compressor, p).delta
        if alg.beta * (1 + d) > 1:
            log.warning("beta * (1 + delta) = %.3f exceeds 1", alg.beta * (1 + d))
    if alg.batch > obj.dataset.J:
        raise InvalidInputError(f"batch size {alg.batch} exceeds J={obj.dataset.J}")
    if f_star is None:
        _, f_star = ob.solve_reference(obj)
    x = np.zeros(p) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (p,):
        raise InvalidInputError("x0 has the wrong dimension")

    workers = [WorkerState.create(w, p, seed, byzantine=w >= R, debug=debug) for w in range(W)]
    regular, byzantine = workers[:R], workers[R:]
    if alg.gradient_rule == "saga":
        for st in regular:
            init_saga_table(st, obj, x)
    master_h = np.zeros((W, p))
    grad_fn = saga_gradient if alg.gradient_rule == "saga" else sgd_gradient

    trace = RunTrace(iterates=[] if record_iterates else None)
    trace.meta = {"algorithm": alg.name, "method": alg.method, "attack": attack.kind,
                  "seed": seed, "W": W, "R": R, "B": B, "T": alg.T, "f_star": f_star}
    nbytes = 0

    def record(t, gm_iters, gm_gap):
        gap = ob.loss(obj, x) - f_star
        gn = float(np.linalg.norm(ob.full_grad(obj, x)))
        trace.append(t, gap, gn, nbytes, gm_iters, gm_gap)
        if record_iterates:
            trace.iterates.append(x.copy())

    lemma_rng = np.random.default_rng([int(seed), 7])
    started = time.perf_counter()
    record(0, 0, 0.0)
    for t in range(alg.T):
        if lemma1_every and t % lemma1_every == 0 and transport == "direct" and B < W / 2:
            tables = [st.table for st in regular] if alg.gradient_rule == "saga" else None
            trace.lemma1.append(measure_lemma1(
                obj, x, topology, attack, alg.compressor, alg.byzantine_compressor, tables,
                alg.aggregator.eps, lemma1_draws, lemma_rng, t=t))

        # regular phase
        grads = [grad_fn(st, obj, x, alg.batch) for st in regular]
        if transport == "direct":
            msgs = [compress(alg.compressor, g, st.compress_rng) for st, g in zip(regular, grads)]
        elif transport == "gdc":
            msgs = [gdc_message(st, g, alg.compressor, alg.beta) for st, g in zip(regular, grads)]
        elif transport == "ef":
            msgs = [ef_message(st, g, alg.compressor) for st, g in zip(regular, grads)]
        else:
            msgs = [CompressedMessage("sign", p, signs=g >= 0, scale=1.0) for g in grads]

        # Byzantine phase, after every regular vector is known
        if B:
            G = np.array(grads)
            for st in byzantine:
                msgs.append(byzantine_message(
                    st, attack, G, R, B, alg.byzantine_compressor, transport,
                    beta=alg.beta or 0.0, follow_protocol=alg.byzantine_follows_protocol,
                    index=st.id - R))

        # master
        decoded = np.array([decode(m) for m in msgs])
        nbytes += sum(m.byte_cost for m in msgs)
        if transport == "gdc":
            received = master_h + decoded
            master_h = master_h + alg.beta * decoded
            if debug:
                for st in regular:
                    if not np.array_equal(st.h, master_h[st.id]):
                        raise AssertionError(f"h out of sync for worker {st.id}")
        else:
            received = decoded
        direction, gm = aggregate_detailed(alg.aggregator, received)
        x = x - alg.gamma * direction
        if not np.all(np.isfinite(x)):
            trace.meta["wall_time"] = time.perf_counter() - started
            raise DivergenceError(f"{alg.name} diverged at iteration {t + 1}", trace=trace)
        if (t + 1) % stride == 0 or t + 1 == alg.T:
            record(t + 1, gm.iterations if gm else 0, gm.certified_gap if gm else 0.0)
    trace.meta["wall_time"] = time.perf_counter() - started
    return trace


def with_overrides(alg: AlgorithmSpec, **changes) -> AlgorithmSpec:
    return replace(alg, **changes)


def spec_to_dict(alg: AlgorithmSpec) -> dict:
    return asdict(alg)
