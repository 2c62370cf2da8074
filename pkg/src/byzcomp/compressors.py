"""Gradient compressors, their wire format and byte accounting.

Unbiased variants: ``rand_k`` (keep ``k`` random coordinates scaled by
``p/k``) and ``rand_quant`` (stochastic rounding onto ``s + 1`` equispaced
levels spanning ``[-max|x|, max|x|]``). Biased variants: ``top_k`` and
``l1_sign``. ``identity`` sends the dense vector.

Wire format (little endian)::

    header   u8 kind tag | u32 dim | u32 count
    dense    dim * f64
    sparse   count * u32 index, then count * f64 value     (count = k)
    sign     f64 scale, then ceil(dim / 8) bytes sign bits  (1 = non-negative)
    quantized f64 low, f64 high, then dim codes of width ceil(log2(count + 1))
             bits packed MSB-first                          (count = s)

The 9-byte header is framing the receiver could infer from the run
configuration; ``byte_cost`` counts only the payload.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

VARIANTS = ("identity", "rand_k", "rand_quant", "top_k", "l1_sign")
KINDS = ("dense", "sparse", "sign", "quantized")
_TAGS = {kind: i for i, kind in enumerate(KINDS)}
_HEADER = struct.Struct("<BII")

INDEX_BYTES = 4
VALUE_BYTES = 8


@dataclass(frozen=True)
class CompressorSpec:
    """Which compressor to apply; ``k`` for sparsifiers, ``levels`` for rand_quant."""

    variant: str = "identity"
    k: int | None = None
    levels: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown compressor {self.variant!r}")
        if self.variant in ("rand_k", "top_k"):
            if self.k is None or self.k < 1:
                raise InvalidInputError(f"{self.variant} needs k >= 1")
        if self.variant == "rand_quant" and (self.levels is None or self.levels < 1):
            raise InvalidInputError("rand_quant needs levels >= 1")

    @property
    def unbiased(self) -> bool:
        return self.variant in ("identity", "rand_k", "rand_quant")

    def check_dim(self, p: int) -> None:
        if self.k is not None and self.variant in ("rand_k", "top_k") and self.k > p:
            raise InvalidInputError(f"k={self.k} exceeds dimension {p}")

    @classmethod
    def ratio(cls, variant: str, p: int, fraction: float) -> CompressorSpec:
        """Sparsifier keeping ``round(fraction * p)`` (at least one) coordinates."""
        return cls(variant, k=max(1, int(round(fraction * p))))


@dataclass(frozen=True)
class CompressedMessage:
    kind: str
    dim: int
    values: np.ndarray | None = None
    indices: np.ndarray | None = None
    signs: np.ndarray | None = None
    scale: float = 0.0
    low: float = 0.0
    high: float = 0.0
    levels: int = 0
    codes: np.ndarray | None = None
    # dense form, filled by compress() so in-process decoding skips validation
    cached: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def byte_cost(self) -> int:
        return byte_cost_model(self)

    def to_bytes(self) -> bytes:
        return serialize(self)


class CompressorStats(NamedTuple):
    delta: float | None
    kappa: float | None


def compressor_stats(spec: CompressorSpec, p: int, x=None) -> CompressorStats:
    """Closed-form ``delta`` (unbiased) / ``kappa`` (general) where one exists.

    ``l1_sign``'s kappa depends on the input, so ``x`` is required for it.
    ``rand_quant`` has no closed-form delta here; use :func:`measure_variance`.
    """
    spec.check_dim(p)
    v = spec.variant
    if v == "identity":
        return CompressorStats(0.0, 1.0)
    if v == "rand_k":
        return CompressorStats(p / spec.k - 1.0, None)
    if v == "rand_quant":
        return CompressorStats(None, None)
    if v == "top_k":
        return CompressorStats(None, spec.k / p)
    if x is None:
        raise InvalidInputError("l1_sign kappa is input dependent; pass x")
    x = np.asarray(x, dtype=np.float64)
    n2 = float(x @ x)
    return CompressorStats(None, 1.0 if n2 == 0 else float(np.abs(x).sum()) ** 2 / (p * n2))


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("expected a 1-D vector")
    # a finite sum implies finite entries; only fall back to the full scan on overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = x.sum()
    if not math.isfinite(total) and not np.isfinite(x).all():
        raise InvalidInputError("cannot compress a non-finite vector")
    return x


def _code_width(levels: int) -> int:
    return max(1, math.ceil(math.log2(levels + 1)))


def compress(spec: CompressorSpec, x, rng: np.random.Generator | None = None) -> CompressedMessage:
    """Encode ``x``; randomized variants draw from ``rng``."""
    x = _as_vector(x)
    p = x.shape[0]
    spec.check_dim(p)
    v = spec.variant
    if v == "identity":
        vals = x.copy()
        return CompressedMessage("dense", p, values=vals, cached=vals)
    if v in ("rand_k", "top_k"):
        if v == "rand_k":
            # the k smallest of p uniform keys form a uniform k-subset
            idx = np.sort(np.argpartition(rng.random(p), spec.k - 1)[: spec.k]) if spec.k < p \
                else np.arange(p)
            vals = x[idx] * (p / spec.k)
        else:
            # stable sort keeps the lower index first among equal magnitudes
            idx = np.sort(np.argsort(-np.abs(x), kind="stable")[: spec.k])
            vals = x[idx]
        dense = np.zeros(p)
        dense[idx] = vals
        return CompressedMessage("sparse", p, values=vals, indices=idx, cached=dense)
    if v == "l1_sign":
        signs = x >= 0
        scale = float(np.abs(x).sum()) / p
        return CompressedMessage("sign", p, signs=signs, scale=scale,
                                 cached=np.where(signs, scale, -scale))
    # rand_quant
    s = spec.levels
    m = float(np.abs(x).max()) if p else 0.0
    if m == 0.0:
        return CompressedMessage("quantized", p, low=0.0, high=0.0, levels=s,
                                 codes=np.zeros(p, dtype=np.int64))
    pos = (x + m) * (s / (2.0 * m))
    lower = np.minimum(np.floor(pos), s - 1)
    frac = pos - lower
    codes = (lower + (rng.random(p) < frac)).astype(np.int64)
    msg = CompressedMessage("quantized", p, low=-m, high=m, levels=s, codes=codes)
    return msg


def decode(msg: CompressedMessage) -> np.ndarray:
    if msg.cached is not None:
        return msg.cached.copy()
    p = msg.dim
    if msg.kind == "dense":
        if msg.values is None or msg.values.shape != (p,):
            raise InvalidInputError("dense payload has wrong length")
        return np.array(msg.values, dtype=np.float64)
    if msg.kind == "sparse":
        idx = np.asarray(msg.indices)
        if msg.values is None or idx.shape != np.shape(msg.values):
            raise InvalidInputError("sparse payload has mismatched indices and values")
        if idx.size and (idx[0] < 0 or idx[-1] >= p or np.any(np.diff(idx) <= 0)):
            raise InvalidInputError("sparse indices must be strictly increasing and < dim")
        out = np.zeros(p)
        out[idx] = msg.values
        return out
    if msg.kind == "sign":
        if msg.signs is None or msg.signs.shape != (p,):
            raise InvalidInputError("sign payload has wrong length")
        return np.where(msg.signs, msg.scale, -msg.scale)
    if msg.kind == "quantized":
        codes = np.asarray(msg.codes)
        if codes.shape != (p,) or (p and (codes.min() < 0 or codes.max() > msg.levels)):
            raise InvalidInputError("quantized codes out of range")
        if msg.high == msg.low:
            return np.full(p, msg.low)
        return msg.low + codes * ((msg.high - msg.low) / msg.levels)
    raise InvalidInputError(f"unknown message kind {msg.kind!r}")


def byte_cost_model(msg: CompressedMessage) -> int:
    """Payload bytes: dense 8p, sparse 12k, sign ceil(p/8) + 8,
    quantized 16 + ceil(p * ceil(log2(s + 1)) / 8)."""
    p = msg.dim
    if msg.kind == "dense":
        return VALUE_BYTES * p
    if msg.kind == "sparse":
        return len(msg.indices) * (INDEX_BYTES + VALUE_BYTES)
    if msg.kind == "sign":
        return math.ceil(p / 8) + VALUE_BYTES
    if msg.kind == "quantized":
        return 2 * VALUE_BYTES + math.ceil(p * _code_width(msg.levels) / 8)
    raise InvalidInputError(f"unknown message kind {msg.kind!r}")


def _pack_codes(codes: np.ndarray, width: int) -> bytes:
    shifts = np.arange(width - 1, -1, -1)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack_codes(buf: bytes, n: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[: n * width]
    weights = 1 << np.arange(width - 1, -1, -1)
    return bits.reshape(n, width).astype(np.int64) @ weights


def serialize(msg: CompressedMessage) -> bytes:
    p = msg.dim
    if msg.kind == "dense":
        head, body = 0, np.asarray(msg.values, "<f8").tobytes()
    elif msg.kind == "sparse":
        k = len(msg.indices)
        head = k
        body = np.asarray(msg.indices, "<u4").tobytes() + np.asarray(msg.values, "<f8").tobytes()
    elif msg.kind == "sign":
        head = 0
        body = struct.pack("<d", msg.scale) + np.packbits(np.asarray(msg.signs, bool)).tobytes()
    elif msg.kind == "quantized":
        head = msg.levels
        body = struct.pack("<dd", msg.low, msg.high) + _pack_codes(
            np.asarray(msg.codes, np.int64), _code_width(msg.levels))
    else:
        raise InvalidInputError(f"unknown message kind {msg.kind!r}")
    return _HEADER.pack(_TAGS[msg.kind], p, head) + body


def deserialize(buf: bytes) -> CompressedMessage:
    if len(buf) < _HEADER.size:
        raise InvalidInputError("truncated message header")
    tag, p, count = _HEADER.unpack_from(buf)
    if tag >= len(KINDS):
        raise InvalidInputError(f"unknown kind tag {tag}")
    kind = KINDS[tag]
    body = buf[_HEADER.size:]
    if kind == "dense":
        expected = VALUE_BYTES * p
    elif kind == "sparse":
        expected = count * (INDEX_BYTES + VALUE_BYTES)
    elif kind == "sign":
        expected = VALUE_BYTES + math.ceil(p / 8)
    else:
        if count < 1:
            raise InvalidInputError("quantized message needs levels >= 1")
        expected = 2 * VALUE_BYTES + math.ceil(p * _code_width(count) / 8)
    if len(body) != expected:
        raise InvalidInputError(f"{kind} payload is {len(body)} bytes, expected {expected}")
    if kind == "dense":
        msg = CompressedMessage(kind, p, values=np.frombuffer(body, "<f8").astype(np.float64))
    elif kind == "sparse":
        idx = np.frombuffer(body[: INDEX_BYTES * count], "<u4").astype(np.int64)
        vals = np.frombuffer(body[INDEX_BYTES * count:], "<f8").astype(np.float64)
        msg = CompressedMessage(kind, p, values=vals, indices=idx)
    elif kind == "sign":
        (scale,) = struct.unpack_from("<d", body)
        signs = np.unpackbits(np.frombuffer(body[VALUE_BYTES:], np.uint8))[:p].astype(bool)
        msg = CompressedMessage(kind, p, signs=signs, scale=scale)
    else:
        low, high = struct.unpack_from("<dd", body)
        codes = _unpack_codes(body[16:], p, _code_width(count))
        msg = CompressedMessage(kind, p, low=low, high=high, levels=count, codes=codes)
    decode(msg)  # validates payload ranges
    return msg


def measure_variance(spec: CompressorSpec, x, n_draws: int, rng=None):
    """Empirical ``(||mean Q(x) - x|| / ||x||, mean ||Q(x) - x||^2 / ||x||^2)``."""
    x = _as_vector(x)
    rng = np.random.default_rng() if rng is None else rng
    nx2 = float(x @ x)
    if nx2 == 0.0:
        return 0.0, 0.0
    total = np.zeros_like(x)
    sq = 0.0
    for _ in range(n_draws):
        q = decode(compress(spec, x, rng))
        total += q
        d = q - x
        sq += float(d @ d)
    bias = float(np.linalg.norm(total / n_draws - x)) / math.sqrt(nx2)
    return bias, sq / n_draws / nx2


def ef_step(e, g, spec: CompressorSpec, rng=None):
    """One error-feedback round: compress ``u = g + e`` and keep ``u - Q(u)``."""
    e = np.asarray(e, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if e.shape != g.shape:
        raise InvalidInputError("error and gradient dimensions differ")
    u = g + e
    msg = compress(spec, u, rng)
    return msg, u - decode(msg)
