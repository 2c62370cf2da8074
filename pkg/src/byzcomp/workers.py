"""Per-worker message generation for regular and Byzantine workers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import objective as ob
from .compressors import CompressedMessage, CompressorSpec, compress, decode, ef_step
from .errors import InvalidInputError

log = logging.getLogger(__name__)

ATTACKS = ("none", "gaussian", "sign_flip", "zero_grad")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    variance: float = 30.0
    magnitude: float = -3.0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise InvalidInputError(f"unknown attack {self.kind!r}")
        if not self.variance >= 0:
            raise InvalidInputError("attack variance must be non-negative")


def make_rng(seed, worker: int, stream: str) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by run seed, worker id and purpose.

    Sampling and compression use separate streams so that swapping the
    compressor never shifts which samples a worker draws.
    """
    tag = {"sample": 0, "compress": 1, "attack": 2}[stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), worker, tag])))


@dataclass
class WorkerState:
    id: int
    byzantine: bool = False
    p: int = 0
    sample_rng: np.random.Generator | None = None
    compress_rng: np.random.Generator | None = None
    attack_rng: np.random.Generator | None = None
    table: np.ndarray | None = None
    table_mean: np.ndarray | None = None
    h: np.ndarray = field(default=None)
    e: np.ndarray = field(default=None)
    debug: bool = False

    def __post_init__(self):
        if self.h is None:
            self.h = np.zeros(self.p)
        if self.e is None:
            self.e = np.zeros(self.p)

    @classmethod
    def create(cls, id: int, p: int, seed, byzantine=False, debug=False) -> WorkerState:
        return cls(id=id, byzantine=byzantine, p=p,
                   sample_rng=make_rng(seed, id, "sample"),
                   compress_rng=make_rng(seed, id, "compress"),
                   attack_rng=make_rng(seed, id, "attack"),
                   debug=debug)

    def snapshot(self) -> dict:
        """Plain-data copy of the state, RNG positions included."""
        return {
            "id": self.id,
            "byzantine": self.byzantine,
            "p": self.p,
            "rng": {name: getattr(self, f"{name}_rng").bit_generator.state
                    for name in ("sample", "compress", "attack")},
            "table": None if self.table is None else self.table.tolist(),
            "table_mean": None if self.table_mean is None else self.table_mean.tolist(),
            "h": self.h.tolist(),
            "e": self.e.tolist(),
        }

    @classmethod
    def restore(cls, snap: dict) -> WorkerState:
        rngs = {}
        for name, state in snap["rng"].items():
            bg = np.random.Philox()
            bg.state = state
            rngs[f"{name}_rng"] = np.random.Generator(bg)
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(id=snap["id"], byzantine=snap["byzantine"], p=snap["p"],
                   table=arr(snap["table"]), table_mean=arr(snap["table_mean"]),
                   h=arr(snap["h"]), e=arr(snap["e"]), **rngs)


def _require_regular(state: WorkerState):
    if state.byzantine:
        raise InvalidInputError(f"worker {state.id} is Byzantine")


def _draw(state: WorkerState, J: int, batch: int):
    if batch == 1:
        return int(state.sample_rng.integers(J))
    if not 1 <= batch <= J:
        raise InvalidInputError(f"batch size {batch} outside [1, {J}]")
    return np.sort(state.sample_rng.choice(J, size=batch, replace=False))


def sgd_gradient(state: WorkerState, obj: ob.Objective, x, batch: int = 1) -> np.ndarray:
    """Gradient of one uniformly drawn local sample, or the mean over a
    mini-batch drawn without replacement."""
    _require_regular(state)
    i = _draw(state, obj.dataset.J, batch)
    if batch == 1:
        return ob.sample_grad(obj, x, state.id, i)
    return ob.sample_grads(obj, x, np.full(batch, state.id), i).mean(axis=0)


def init_saga_table(state: WorkerState, obj: ob.Objective, x0) -> None:
    """Fill the gradient table with every local sample gradient at ``x0``."""
    _require_regular(state)
    state.table = ob.worker_sample_grads(obj, x0, state.id).copy()
    state.table_mean = state.table.mean(axis=0)


def saga_gradient(state: WorkerState, obj: ob.Objective, x, batch: int = 1) -> np.ndarray:
    """Variance-reduced gradient; replaces the drawn samples' table entries.

    The table mean is updated incrementally; in debug mode it is compared
    against a full recomputation.
    """
    _require_regular(state)
    if state.table is None:
        raise InvalidInputError(f"worker {state.id} has no SAGA table; call init_saga_table")
    J = obj.dataset.J
    i = _draw(state, J, batch)
    if batch == 1:
        fresh = ob.sample_grad(obj, x, state.id, i)
        g = fresh + (state.table_mean - state.table[i])
        state.table_mean = state.table_mean + (fresh - state.table[i]) / J
    else:
        fresh = ob.sample_grads(obj, x, np.full(batch, state.id), i)
        g = fresh.mean(axis=0) + (state.table_mean - state.table[i].mean(axis=0))
        state.table_mean = state.table_mean + (fresh - state.table[i]).sum(axis=0) / J
    state.table[i] = fresh
    if J == 1:
        # a one-row table is its own mean; the incremental update would round
        state.table_mean = fresh.copy()
    if state.debug:
        drift = np.max(np.abs(state.table_mean - state.table.mean(axis=0)))
        if drift > 1e-9:
            raise AssertionError(f"SAGA table mean drifted by {drift:.3e}")
    return g


def gdc_message(state: WorkerState, g, spec: CompressorSpec, beta: float,
                delta: float | None = None) -> CompressedMessage:
    """Compress ``g - h`` and move ``h`` by ``beta`` times the decoded difference."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.h.shape:
        raise InvalidInputError("gradient and h dimensions differ")
    if delta is not None and beta * (1.0 + delta) > 1.0:
        log.warning("beta * (1 + delta) = %.3f exceeds 1", beta * (1.0 + delta))
    msg = compress(spec, g - state.h, state.compress_rng)
    state.h = state.h + beta * decode(msg)
    return msg


def ef_message(state: WorkerState, g, spec: CompressorSpec) -> CompressedMessage:
    msg, state.e = ef_step(state.e, g, spec, state.compress_rng)
    return msg


def byzantine_vector(attack: AttackSpec, regular_gradients, R: int, B: int,
                     rng: np.random.Generator | None = None, index: int = 0) -> np.ndarray:
    """Malicious vector of the ``index``-th Byzantine worker.

    gaussian: regular mean plus isotropic noise of the given variance;
    sign_flip: ``magnitude`` times the regular mean; zero_grad: ``-sum / B``
    so the mean over all workers cancels. For zero_grad the colluding
    attackers make the cancellation exact in floating point: the last one
    sends the negated running sum of the rows stacked before it.
    """
    G = np.asarray(regular_gradients, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != R:
        raise InvalidInputError(f"expected {R} regular vectors")
    mean = G.mean(axis=0)
    if attack.kind == "gaussian":
        if attack.variance == 0:
            return mean
        return mean + np.sqrt(attack.variance) * rng.standard_normal(mean.shape[0])
    if attack.kind == "sign_flip":
        return attack.magnitude * mean
    if attack.kind == "zero_grad":
        if B == 0:
            raise InvalidInputError("zero-gradient attack needs B > 0")
        if not 0 <= index < B:
            raise InvalidInputError(f"Byzantine index {index} outside [0, {B})")
        # row-by-row, matching a reduction over the stacked messages
        total = G[0].copy()
        for row in G[1:]:
            total += row
        share = -total / B
        if index < B - 1:
            return share
        for _ in range(B - 1):
            total += share
        return -total
    raise InvalidInputError("no attack configured")


def byzantine_message(state: WorkerState, attack: AttackSpec, regular_gradients, R: int, B: int,
                      spec: CompressorSpec, mode: str = "direct", beta: float = 0.0,
                      follow_protocol: bool = False, index: int = 0) -> CompressedMessage:
    """Compressed malicious message.

    By default the vector is compressed and sent as is, whatever the regular
    transport (``mode`` in direct, gdc, ef, sign). With ``follow_protocol``
    the attacker runs the same difference or error-feedback bookkeeping as a
    regular worker, so the master reconstructs its vector faithfully.
    """
    v = byzantine_vector(attack, regular_gradients, R, B, state.attack_rng, index)
    if mode == "sign":
        return CompressedMessage("sign", v.shape[0], signs=v >= 0, scale=1.0)
    if follow_protocol and mode == "gdc":
        return gdc_message(state, v, spec, beta)
    if follow_protocol and mode == "ef":
        return ef_message(state, v, spec)
    return compress(spec, v, state.compress_rng)
