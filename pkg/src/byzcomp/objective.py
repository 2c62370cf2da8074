"""Regularized logistic regression over a partitioned dataset.

Each regular worker holds ``J`` samples ``(a, b)`` with ``b`` in {-1, +1}.
The per-sample cost is ``log(1 + exp(-b <a, x>)) + reg/2 ||x||^2``; the
local cost is the mean over a worker's samples and the global cost is the
mean over workers.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, InvalidInputError, ParseError


class Sample(NamedTuple):
    features: np.ndarray
    label: float


@dataclass(frozen=True)
class Dataset:
    """Samples split evenly across ``R`` regular workers.

    ``features`` has shape ``(R, J, p)`` and ``labels`` shape ``(R, J)``.
    Arrays are made read-only on construction.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        A = np.ascontiguousarray(self.features, dtype=np.float64)
        b = np.ascontiguousarray(self.labels, dtype=np.float64)
        if A.ndim != 3 or b.shape != A.shape[:2]:
            raise InvalidInputError(
                f"features must be (R, J, p) and labels (R, J); got {A.shape}, {b.shape}")
        if A.shape[0] < 1 or A.shape[1] < 1:
            raise InvalidInputError("need at least one worker and one sample per worker")
        if not np.all(np.isfinite(A)):
            raise InvalidInputError("features must be finite")
        if not np.all(np.abs(b) == 1.0):
            raise InvalidInputError("labels must be exactly -1 or +1")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "features", A)
        object.__setattr__(self, "labels", b)

    @property
    def R(self) -> int:
        return self.features.shape[0]

    @property
    def J(self) -> int:
        return self.features.shape[1]

    @property
    def p(self) -> int:
        return self.features.shape[2]

    def sample(self, worker: int, j: int) -> Sample:
        return Sample(self.features[worker, j], float(self.labels[worker, j]))

    @classmethod
    def from_samples(cls, features, labels, R: int, seed=0, J: int | None = None) -> Dataset:
        """Shuffle ``n`` samples with ``seed`` and deal ``J`` to each of ``R`` workers.

        ``J`` defaults to ``n // R``; leftover samples are dropped.
        """
        A = np.asarray(features, dtype=np.float64)
        b = np.asarray(labels, dtype=np.float64)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise InvalidInputError("features must be (n, p) with one label per row")
        n = A.shape[0]
        if R < 1:
            raise InvalidInputError("R must be positive")
        if J is None:
            J = n // R
        if J < 1 or R * J > n:
            raise InvalidInputError(f"cannot give {J} samples to each of {R} workers from {n}")
        perm = np.random.default_rng(seed).permutation(n)[: R * J]
        return cls(A[perm].reshape(R, J, -1), b[perm].reshape(R, J))


@dataclass(frozen=True)
class Objective:
    dataset: Dataset
    reg: float = 0.01

    def __post_init__(self):
        if not self.reg >= 0:
            raise InvalidInputError("regularization must be non-negative")

    @property
    def p(self) -> int:
        return self.dataset.p


def _check_x(obj: Objective, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (obj.p,):
        raise InvalidInputError(f"expected a vector of length {obj.p}, got shape {x.shape}")
    return x


def _logistic_loss(margins):
    # log(1 + exp(-z)) without overflow
    return np.logaddexp(0.0, -margins)


def sample_loss(obj: Objective, x, worker: int, j: int) -> float:
    x = _check_x(obj, x)
    a, b = obj.dataset.sample(worker, j)
    z = b * (a @ x)
    return float(_logistic_loss(z)) + 0.5 * obj.reg * float(x @ x)


def sample_grad(obj: Objective, x, worker: int, j: int) -> np.ndarray:
    x = _check_x(obj, x)
    a = obj.dataset.features[worker, j]
    b = obj.dataset.labels[worker, j]
    return (-b * expit(-b * (a @ x))) * a + obj.reg * x


def sample_grads(obj: Objective, x, workers, js) -> np.ndarray:
    """Rows ``sample_grad(x, workers[i], js[i])`` stacked into an array."""
    x = _check_x(obj, x)
    A = obj.dataset.features[workers, js]
    b = obj.dataset.labels[workers, js]
    coef = -b * expit(-b * (A @ x))
    return coef[:, None] * A + obj.reg * x


def worker_sample_grads(obj: Objective, x, worker: int) -> np.ndarray:
    """All ``J`` sample gradients of one worker, shape ``(J, p)``."""
    x = _check_x(obj, x)
    A = obj.dataset.features[worker]
    b = obj.dataset.labels[worker]
    coef = -b * expit(-b * (A @ x))
    return coef[:, None] * A + obj.reg * x


def local_loss(obj: Objective, x, worker: int) -> float:
    x = _check_x(obj, x)
    A = obj.dataset.features[worker]
    b = obj.dataset.labels[worker]
    return float(np.mean(_logistic_loss(b * (A @ x)))) + 0.5 * obj.reg * float(x @ x)


def local_grad(obj: Objective, x, worker: int) -> np.ndarray:
    return worker_sample_grads(obj, x, worker).mean(axis=0)


def local_grads(obj: Objective, x) -> np.ndarray:
    """Local gradients of every regular worker, shape ``(R, p)``."""
    x = _check_x(obj, x)
    A = obj.dataset.features
    b = obj.dataset.labels
    coef = -b * expit(-b * (A @ x))
    return np.einsum("rj,rjp->rp", coef, A) / obj.dataset.J + obj.reg * x


def loss(obj: Objective, x) -> float:
    x = _check_x(obj, x)
    A = obj.dataset.features
    b = obj.dataset.labels
    return float(np.mean(_logistic_loss(b * (A @ x)))) + 0.5 * obj.reg * float(x @ x)


def full_grad(obj: Objective, x) -> np.ndarray:
    return local_grads(obj, x).mean(axis=0)


def solve_reference(obj: Objective, tol: float = 1e-10, max_iter: int = 200_000, x0=None):
    """Minimize the global cost by gradient descent with Armijo backtracking.

    Returns ``(x_star, f_star)`` with ``||full_grad(x_star)|| <= tol``.
    The trial step doubles after every accepted step. Once the predicted
    decrease drops below the resolution of ``f`` the Armijo test is
    meaningless, so the step is capped at ``1 / L`` and taken unconditionally.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    x = np.zeros(obj.p) if x0 is None else _check_x(obj, x0).copy()
    A = obj.dataset.features.reshape(-1, obj.p)
    L = obj.reg + 0.25 * _power_iteration(A.T @ A / A.shape[0])
    fx = loss(obj, x)
    g = full_grad(obj, x)
    step = 1.0 / L
    for _ in range(max_iter):
        gn2 = float(g @ g)
        if math.sqrt(gn2) <= tol:
            return x, fx
        if 0.5 * step * gn2 <= 1e-13 * max(1.0, abs(fx)):
            step = min(step, 1.0 / L)
            x = x - step * g
            fx = loss(obj, x)
        else:
            step *= 2.0
            while True:
                x_new = x - step * g
                f_new = loss(obj, x_new)
                if f_new <= fx - 0.5 * step * gn2:
                    break
                step *= 0.5
            x, fx = x_new, f_new
        g = full_grad(obj, x)
    gn = float(np.linalg.norm(g))
    if gn <= tol:
        return x, fx
    raise ConvergenceError(f"no convergence in {max_iter} iterations (|grad|={gn:.3e})", grad_norm=gn)


def _power_iteration(M: np.ndarray, tol=1e-10, max_iter=10_000, seed=0) -> float:
    v = np.random.default_rng(seed).standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam_new = float(v @ w)
        v = w / nw
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    raise ConvergenceError("power iteration did not converge")


class ProblemConstants(NamedTuple):
    mu: float
    L: float
    sigma2: float
    zeta2: float


def estimate_constants(obj: Objective, x_star=None) -> ProblemConstants:
    """Strong convexity, smoothness and the two variation measures at ``x_star``.

    ``mu`` is the regularization weight. ``L`` bounds every local Hessian via
    ``reg + lambda_max(A^T A / J) / 4``. ``sigma2`` is the mean squared spread
    of local gradients around the global one (outer variation) and ``zeta2``
    the largest per-worker sample-gradient variance (inner variation).
    """
    if x_star is None:
        x_star, _ = solve_reference(obj)
    x_star = _check_x(obj, x_star)
    ds = obj.dataset
    lam = max(_power_iteration(ds.features[w].T @ ds.features[w] / ds.J) for w in range(ds.R))
    L = obj.reg + 0.25 * lam
    lg = local_grads(obj, x_star)
    g = lg.mean(axis=0)
    sigma2 = float(np.mean(np.sum((lg - g) ** 2, axis=1)))
    zeta2 = max(
        float(np.mean(np.sum((worker_sample_grads(obj, x_star, w) - lg[w]) ** 2, axis=1)))
        for w in range(ds.R)
    )
    return ProblemConstants(obj.reg, L, sigma2, zeta2)


def generate_synthetic(seed, R: int, J: int, p: int, noise: float = 1.0) -> Dataset:
    """Gaussian features labelled by a random unit hyperplane plus label noise.

    ``b = sign(<a, w> + noise * n)`` with ``a ~ N(0, I)`` and ``n ~ N(0, 1)``;
    a zero score is labelled +1.
    """
    if min(R, J, p) < 1 or noise < 0:
        raise InvalidInputError("R, J, p must be positive and noise non-negative")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(p)
    w /= np.linalg.norm(w)
    A = rng.standard_normal((R * J, p))
    score = A @ w + noise * rng.standard_normal(R * J)
    b = np.where(score >= 0, 1.0, -1.0)
    return Dataset(A.reshape(R, J, p), b.reshape(R, J))


def truth_vector(seed, p: int) -> np.ndarray:
    """The hyperplane normal ``generate_synthetic`` draws for ``seed``."""
    w = np.random.default_rng(seed).standard_normal(p)
    return w / np.linalg.norm(w)


def parse_libsvm(lines, p: int | None = None):
    """Parse LibSVM text into ``(features (n, p), raw_labels (n,))``.

    Indices are 1-based. ``p`` defaults to the largest index seen.
    """
    rows, labels = [], []
    max_idx = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            label = float(parts[0])
        except ValueError:
            raise ParseError(f"bad label {parts[0]!r}", lineno) from None
        entries = {}
        for tok in parts[1:]:
            idx, sep, val = tok.partition(":")
            try:
                i = int(idx)
                v = float(val)
            except ValueError:
                raise ParseError(f"bad feature {tok!r}", lineno) from None
            if not sep or i < 1:
                raise ParseError(f"bad feature {tok!r}", lineno)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value in {tok!r}", lineno)
            entries[i] = v
            max_idx = max(max_idx, i)
        rows.append(entries)
        labels.append(label)
    if not rows:
        raise ParseError("no samples found")
    if p is None:
        p = max_idx
    elif max_idx > p:
        raise ParseError(f"feature index {max_idx} exceeds p={p}")
    X = np.zeros((len(rows), p))
    for r, entries in enumerate(rows):
        for i, v in entries.items():
            X[r, i - 1] = v
    return X, np.asarray(labels)


def binarize_labels(raw, positive=(2,)) -> np.ndarray:
    """Map raw labels in ``positive`` to +1 and everything else to -1."""
    return np.where(np.isin(raw, np.asarray(positive, dtype=np.float64)), 1.0, -1.0)


def load_libsvm(path, R: int, seed=0, p: int | None = None, positive=(2,),
                scale: bool = True, n_max: int | None = None, J: int | None = None) -> Dataset:
    """Load a LibSVM file and partition it across ``R`` workers.

    Defaults follow the COVTYPE convention: class 2 is the positive label.
    With ``scale`` each feature is min-max scaled to [0, 1] (constant columns
    become 0). ``n_max`` keeps the first ``n_max`` samples after a seeded
    shuffle.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        X, raw = parse_libsvm(fh, p)
    if n_max is not None and n_max < X.shape[0]:
        keep = np.sort(np.random.default_rng(seed).permutation(X.shape[0])[:n_max])
        X, raw = X[keep], raw[keep]
    if scale:
        lo = X.min(axis=0)
        span = X.max(axis=0) - lo
        X = np.divide(X - lo, span, out=np.zeros_like(X), where=span > 0)
    return Dataset.from_samples(X, binarize_labels(raw, positive), R, seed=seed, J=J)


def write_libsvm(path, features, labels) -> None:
    """Write rows in LibSVM format, skipping zero entries; floats use repr."""
    X = np.asarray(features, dtype=np.float64)
    with open(path, "w") as fh:
        for row, lab in zip(X, labels):
            lab = float(lab)
            head = str(int(lab)) if lab.is_integer() else repr(lab)
            items = " ".join(f"{i + 1}:{float(v)!r}" for i, v in enumerate(row) if v != 0)
            fh.write(f"{head} {items}".rstrip() + "\n")
