"""Aggregation rules run by the master.

``geomed`` is an epsilon-approximate geometric median computed with
Weiszfeld's iteration. Every iterate is a convex combination of the input
points, and so is the true median, so ``D = max_i ||v - v_i||`` bounds the
distance to the optimum. Convexity then gives the certificate

    F(v) - F* <= max(||s|| - m, 0) * D + 2 * sum_{i in K} ||v - v_i||

where ``K`` holds the ``m`` points within ``eps / (4W)`` of ``v`` (their
terms are treated through a ``2 d_i``-subdifferential) and ``s`` is the
gradient of the remaining terms. A second bound comes from weak duality:
the unit vectors ``u_i = (v - v_i) / d_i`` shifted by ``-s_all / W`` and
shrunk by ``1 + ||s_all|| / W`` are dual feasible, giving

    F(v) - F* <= F(v) - (F(v) - <s_all, v - mean>) / (1 + ||s_all|| / W).

The smaller bound is reported. Iteration stops once it is below ``eps``, or
when the objective improves by less than ``eps / 10`` three times in a row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidInputError

log = logging.getLogger(__name__)

RULES = ("geomed", "mean", "norm_threshold", "sign_majority")

SMOOTHING = 1e-12
MAX_ITER = 100_000


@dataclass(frozen=True)
class GeomedResult:
    point: np.ndarray
    objective: float
    iterations: int
    certified_gap: float
    certified: bool


@dataclass(frozen=True)
class AggregatorSpec:
    rule: str = "geomed"
    eps: float = 1e-5
    fraction: float = 0.3

    def __post_init__(self):
        if self.rule not in RULES:
            raise InvalidInputError(f"unknown aggregation rule {self.rule!r}")
        if not self.eps > 0:
            raise InvalidInputError("eps must be positive")
        if not 0 <= self.fraction < 1:
            raise InvalidInputError("fraction must lie in [0, 1)")


@numba.njit(cache=True)
def _weiszfeld(points, v, eps, max_iter, history, floor, fallback):
    W, p = points.shape
    tau = eps / (4.0 * W)
    d = np.empty(W)
    s = np.empty(p)
    sall = np.empty(p)
    centre = np.zeros(p)
    for i in range(W):
        for j in range(p):
            centre[j] += points[i, j] / W
    num = np.empty(p)
    prev = np.inf
    slow = 0
    it = 0
    obj = 0.0
    gap = np.inf
    while True:
        obj = 0.0
        dmax = 0.0
        for i in range(W):
            acc = 0.0
            for j in range(p):
                t = v[j] - points[i, j]
                acc += t * t
            d[i] = math.sqrt(acc)
            obj += d[i]
            if d[i] > dmax:
                dmax = d[i]
        if history.shape[0] > it:
            history[it] = obj

        # certificate
        s[:] = 0.0
        sall[:] = 0.0
        m = 0
        slack = 0.0
        for i in range(W):
            if d[i] > 0.0:
                for j in range(p):
                    sall[j] += (v[j] - points[i, j]) / d[i]
            if d[i] <= tau:
                m += 1
                slack += 2.0 * d[i]
            else:
                for j in range(p):
                    s[j] += (v[j] - points[i, j]) / d[i]
        sn = 0.0
        san = 0.0
        inner = 0.0
        for j in range(p):
            sn += s[j] * s[j]
            san += sall[j] * sall[j]
            inner += sall[j] * (v[j] - centre[j])
        sn = math.sqrt(sn)
        san = math.sqrt(san)
        gap = max(sn - m, 0.0) * dmax + slack
        dual_gap = obj - (obj - inner) / (1.0 + san / W)
        if dual_gap < gap:
            gap = max(dual_gap, 0.0)
        if gap <= eps or it >= max_iter:
            break
        if fallback and prev - obj < eps / 10.0:
            slow += 1
            if slow >= 3:
                break
        else:
            slow = 0
        prev = obj

        # Weiszfeld step; points closer than the smoothing floor are treated as
        # coincident and handled with the Vardi-Zhang modification.
        num[:] = 0.0
        den = 0.0
        mult = 0
        for i in range(W):
            if d[i] <= floor:
                mult += 1
                continue
            w = 1.0 / d[i]
            den += w
            for j in range(p):
                num[j] += w * points[i, j]
        if den == 0.0:
            break
        if mult == 0:
            for j in range(p):
                v[j] = num[j] / den
        else:
            r = 0.0
            for j in range(p):
                t = num[j] - den * v[j]
                r += t * t
            r = math.sqrt(r)
            if r <= mult:
                break
            lam = mult / r
            for j in range(p):
                v[j] = (1.0 - lam) * (num[j] / den) + lam * v[j]
        it += 1
    return obj, it, gap


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise InvalidInputError("points must form a (W, p) array")
    if pts.shape[0] < 1:
        raise InvalidInputError("need at least one point")
    return np.ascontiguousarray(pts)


def geometric_median(points, eps: float = 1e-5, max_iter: int = MAX_ITER, init=None,
                     debug: bool = False, fallback: bool = True) -> GeomedResult:
    """Epsilon-approximate geometric median of the rows of ``points``.

    Starts from the coordinate-wise mean unless ``init`` is given. With
    ``debug`` the per-iteration objective is checked to be non-increasing.
    ``fallback=False`` disables the slow-progress stop, so iteration runs
    until the gap is certified or ``max_iter`` is reached.
    """
    pts = _as_points(points)
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    v = pts.mean(axis=0) if init is None else np.array(init, dtype=np.float64)
    if v.shape != pts.shape[1:]:
        raise InvalidInputError("init has the wrong dimension")
    history = np.empty(max_iter + 1 if debug else 0)
    obj, iters, gap = _weiszfeld(pts, v, float(eps), int(max_iter), history, SMOOTHING, bool(fallback))
    if debug:
        h = history[: iters + 1]
        bad = np.nonzero(np.diff(h) > 1e-12 * max(1.0, h[0]))[0]
        if bad.size:
            raise AssertionError(f"Weiszfeld objective increased at iteration {bad[0] + 1}")
    certified = gap <= eps
    if not certified:
        log.debug("geometric median not certified: gap bound %.3e after %d iterations", gap, iters)
    return GeomedResult(v, float(obj), int(iters), float(gap), bool(certified))


def geomed_objective(points, v) -> float:
    pts = _as_points(points)
    return float(np.linalg.norm(pts - np.asarray(v, dtype=np.float64), axis=1).sum())


def geomed_gap_bound(points, result: GeomedResult, eps: float = 1e-5) -> float:
    """Upper bound on ``F(result.point) - inf F`` from an independent solve.

    The reference restarts from the coordinate-wise median and runs to
    ``eps / 100`` without the slow-progress stop; its own certified bound is
    subtracted so the returned value over-estimates the true suboptimality.
    """
    pts = _as_points(points)
    ref = geometric_median(pts, eps / 100.0, init=np.median(pts, axis=0), fallback=False)
    lower = ref.objective - ref.certified_gap
    return max(0.0, geomed_objective(pts, result.point) - lower)


def norm_threshold(vectors, fraction: float) -> np.ndarray:
    """Mean after dropping the ``ceil(fraction * W)`` largest-norm vectors.

    Equal norms are dropped in order of index.
    """
    V = _as_points(vectors)
    W = V.shape[0]
    # guard against 0.3 * 70 = 21.000000000000004
    drop = math.ceil(fraction * W - 1e-9)
    drop = min(drop, W - 1)
    order = np.argsort(-np.linalg.norm(V, axis=1), kind="stable")
    keep = np.sort(order[drop:])
    return V[keep].mean(axis=0)


def sign_majority(vectors) -> np.ndarray:
    total = _as_points(vectors).sum(axis=0)
    return np.where(total >= 0, 1.0, -1.0)


def aggregate_detailed(spec: AggregatorSpec, vectors):
    """``(direction, GeomedResult or None)``."""
    V = _as_points(vectors)
    if spec.rule == "geomed":
        res = geometric_median(V, spec.eps)
        return res.point, res
    if spec.rule == "mean":
        return V.mean(axis=0), None
    if spec.rule == "norm_threshold":
        return norm_threshold(V, spec.fraction), None
    return sign_majority(V), None


def aggregate(spec: AggregatorSpec, vectors) -> np.ndarray:
    return aggregate_detailed(spec, vectors)[0]
