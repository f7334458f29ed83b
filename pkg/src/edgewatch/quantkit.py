"""Post-training affine quantization and magnitude pruning for detector weights.

The functional API (:func:`quantize_affine`, :func:`dequantize`,
:func:`prune_magnitude`, :func:`storage_footprint`) is the primitive layer.
:class:`AffineQuantizer` and :class:`MagnitudePruner` wrap it in the
scikit-learn transformer protocol so weight post-processing can sit inside a
``Pipeline`` or be cloned with ``get_params``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EmptyInput, NonFiniteValue

SUPPORTED_BIT_WIDTHS = (8,)

# scale (8) + zero_point (4) + original_len (8)
HEADER_BYTES = 20

# bit_width u8, original_len u64, zero_point i32, scale f64 -- all big-endian
_WIRE_HEADER = struct.Struct(">BQid")


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    q_values: np.ndarray
    scale: float
    zero_point: int
    bit_width: int = 8
    original_len: int = 0

    def __post_init__(self):
        q = np.asarray(self.q_values)
        qmax = (1 << self.bit_width) - 1
        if q.ndim != 1:
            raise ValueError("q_values must be one-dimensional")
        if q.size and (q.min() < 0 or q.max() > qmax):
            raise ValueError(f"q_values must lie in [0, {qmax}]")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        if not 0 <= self.zero_point <= qmax:
            raise ValueError(f"zero_point must lie in [0, {qmax}]")
        if self.original_len != q.size:
            raise ValueError("original_len does not match q_values")
        q = q.astype(np.uint8 if self.bit_width == 8 else np.int64)
        q.flags.writeable = False
        object.__setattr__(self, "q_values", q)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.bit_width == other.bit_width
            and self.original_len == other.original_len
            and self.zero_point == other.zero_point
            and self.scale == other.scale
            and np.array_equal(self.q_values, other.q_values)
        )

    def to_bytes(self) -> bytes:
        header = _WIRE_HEADER.pack(
            self.bit_width, self.original_len, self.zero_point, self.scale
        )
        return header + self.q_values.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedTensor":
        if len(data) < _WIRE_HEADER.size:
            raise ValueError("truncated quantized tensor header")
        bit_width, n, zero_point, scale = _WIRE_HEADER.unpack_from(data)
        if bit_width not in SUPPORTED_BIT_WIDTHS:
            raise ValueError(f"unsupported bit width {bit_width}")
        body = data[_WIRE_HEADER.size:]
        if len(body) != n:
            raise ValueError(f"expected {n} value bytes, got {len(body)}")
        q = np.frombuffer(body, dtype=np.uint8)
        return cls(q, scale, zero_point, bit_width, n)


def _check_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("cannot quantize an empty vector")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue("values contain NaN or infinity")
    return v


def _check_bit_width(bit_width: int) -> None:
    if bit_width not in SUPPORTED_BIT_WIDTHS:
        raise ValueError(f"bit_width must be one of {SUPPORTED_BIT_WIDTHS}, got {bit_width}")


def affine_params(range_min: float, range_max: float, bit_width: int = 8) -> tuple[float, int]:
    """Return ``(scale, zero_point)`` for a zero-inclusive range."""
    qmax = (1 << bit_width) - 1
    lo, hi = min(0.0, range_min), max(0.0, range_max)
    if hi == lo:
        return 1.0, 0
    # subnormal ranges can underflow the division
    scale = (hi - lo) / qmax or math.ulp(0.0)
    zero_point = int(np.clip(np.round(-lo / scale), 0, qmax))
    return scale, zero_point


def quantize_with(values, scale: float, zero_point: int, bit_width: int = 8) -> np.ndarray:
    qmax = (1 << bit_width) - 1
    v = np.asarray(values, dtype=np.float64)
    # np.round is round-half-to-even
    return np.clip(np.round(v / scale) + zero_point, 0, qmax).astype(np.int64)


def quantize_affine(values, bit_width: int = 8) -> QuantizedTensor:
    """Quantize a real vector to ``bit_width``-bit unsigned integers.

    The quantization range is ``[min(0, min(values)), max(0, max(values))]``
    so that 0.0 is always exactly representable. Ties round half to even.

    >>> qt = quantize_affine([-1.0, 0.0, 1.0])
    >>> qt.zero_point, qt.q_values.tolist()
    (128, [0, 128, 255])
    """
    _check_bit_width(bit_width)
    v = _check_values(values)
    scale, zero_point = affine_params(float(v.min()), float(v.max()), bit_width)
    q = quantize_with(v, scale, zero_point, bit_width)
    return QuantizedTensor(q, scale, zero_point, bit_width, int(v.size))


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return (qt.q_values.astype(np.float64) - qt.zero_point) * qt.scale


@dataclass(frozen=True)
class PruneReport:
    """``zeroed`` counts entries forced to zero by pruning."""

    kept: int
    zeroed: int

    @property
    def sparsity(self) -> float:
        total = self.kept + self.zeroed
        return self.zeroed / total if total else 0.0


def prune_magnitude(values, fraction: float) -> tuple[np.ndarray, PruneReport]:
    """Zero the ``floor(fraction * n)`` smallest-magnitude entries.

    Ties on magnitude are broken by lowest index first.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("cannot prune an empty vector")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n = v.size
    k = min(n, math.floor(fraction * n))
    out = v.copy()
    if k:
        order = np.argsort(np.abs(v), kind="stable")
        out[order[:k]] = 0.0
    return out, PruneReport(kept=n - k, zeroed=k)


def storage_footprint(kind: str, n: int, bit_width: int = 8) -> int:
    """Bytes needed to store ``n`` weights as ``"float32"`` or ``"quantized"``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if kind == "float32":
        return 4 * n
    if kind == "quantized":
        _check_bit_width(bit_width)
        return n * bit_width // 8 + HEADER_BYTES
    raise ValueError(f"unknown storage kind {kind!r}")


class AffineQuantizer(TransformerMixin, BaseEstimator):
    """Learn a per-tensor affine int8 mapping and apply it.

    ``fit`` learns ``scale_`` and ``zero_point_`` from the flattened input;
    ``transform`` maps reals to integer codes and ``inverse_transform`` maps
    codes back. ``fit_transform(X)`` followed by ``inverse_transform``
    round-trips within ``scale_ / 2``.
    """

    def __init__(self, bit_width=8):
        self.bit_width = bit_width

    def fit(self, X, y=None):
        _check_bit_width(self.bit_width)
        v = _check_values(X)
        self.scale_, self.zero_point_ = affine_params(
            float(v.min()), float(v.max()), self.bit_width
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise NonFiniteValue("values contain NaN or infinity")
        return quantize_with(X, self.scale_, self.zero_point_, self.bit_width)

    def inverse_transform(self, Xq):
        check_is_fitted(self, "scale_")
        return (np.asarray(Xq, dtype=np.float64) - self.zero_point_) * self.scale_

    def to_tensor(self, X) -> QuantizedTensor:
        q = self.transform(X).ravel()
        return QuantizedTensor(q, self.scale_, self.zero_point_, self.bit_width, int(q.size))


class MagnitudePruner(TransformerMixin, BaseEstimator):
    def __init__(self, fraction=0.0):
        self.fraction = fraction

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        _, self.report_ = prune_magnitude(X, self.fraction)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        pruned, _ = prune_magnitude(X, self.fraction)
        return pruned.reshape(X.shape)
