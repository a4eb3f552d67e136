"""Saturating fixed-point arithmetic for the victim's numeric format.

Scalars are :class:`Fx` values (an integer ``raw`` code plus its :class:`QFormat`).
The accelerator works on whole tensors, so every scalar operation has a
vectorised ``*_raw`` twin operating on integer numpy arrays; the scalar
versions are thin wrappers so both paths share one rounding rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "QFormat",
    "Fx",
    "Q3_5",
    "quantize",
    "quantize_raw",
    "fx_add",
    "fx_mul",
    "fx_neg",
    "fx_tanh",
    "add_raw",
    "mul_raw",
    "saturate_raw",
    "shift_round_even",
    "tanh_table",
]


@dataclass(frozen=True)
class QFormat:
    total_bits: int = 8
    integer_bits: int = 3
    signed: bool = True

    def __post_init__(self):
        if not 1 <= self.total_bits <= 32:
            raise ValueError(f"total_bits must be in [1, 32], got {self.total_bits}")
        if not 1 <= self.integer_bits <= self.total_bits:
            raise ValueError(
                f"integer_bits must be in [1, total_bits], got {self.integer_bits}"
            )

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def scale(self) -> float:
        """Real value of one raw LSB."""
        return 2.0 ** -self.frac_bits

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_raw(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    @property
    def n_codes(self) -> int:
        return 1 << self.total_bits

    def codes(self) -> np.ndarray:
        """Every raw code of the format, ascending."""
        return np.arange(self.min_raw, self.max_raw + 1, dtype=np.int64)

    def real(self, raw):
        return raw * self.scale

    def __str__(self):
        kind = "" if self.signed else "U"
        return f"{kind}Q{self.integer_bits}.{self.frac_bits}"


Q3_5 = QFormat(8, 3, True)


@dataclass(frozen=True)
class Fx:
    raw: int
    fmt: QFormat = Q3_5

    def __post_init__(self):
        if not self.fmt.min_raw <= self.raw <= self.fmt.max_raw:
            raise ValueError(f"raw {self.raw} outside {self.fmt}")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.scale

    def __float__(self):
        return self.value

    def __repr__(self):
        return f"Fx({self.value!r}, raw={self.raw}, {self.fmt})"


def saturate_raw(raw, fmt: QFormat):
    return np.clip(raw, fmt.min_raw, fmt.max_raw)


def shift_round_even(x, shift: int):
    """Integer ``x / 2**shift`` rounded to nearest, ties to even."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << -shift
    q = x >> shift
    rem = x & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up


def quantize_raw(x, fmt: QFormat = Q3_5) -> np.ndarray:
    """Nearest raw codes for real values, ties to even, saturating."""
    x = np.asarray(x, dtype=np.float64)
    scaled = np.rint(x * (1 << fmt.frac_bits))
    # clip in float space first so huge inputs cannot overflow int64
    scaled = np.clip(scaled, fmt.min_raw, fmt.max_raw)
    return scaled.astype(np.int64)


def quantize(x: float, fmt: QFormat = Q3_5) -> Fx:
    if math.isnan(x):
        raise ValueError("cannot quantize NaN")
    return Fx(int(quantize_raw(x, fmt)), fmt)


def add_raw(a, b, fmt: QFormat = Q3_5):
    return saturate_raw(np.asarray(a, dtype=np.int64) + b, fmt)


def mul_raw(a, b, fmt: QFormat = Q3_5):
    prod = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    return saturate_raw(shift_round_even(prod, fmt.frac_bits), fmt)


def _check_same(a: Fx, b: Fx):
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")


def fx_add(a: Fx, b: Fx) -> Fx:
    _check_same(a, b)
    return Fx(int(add_raw(a.raw, b.raw, a.fmt)), a.fmt)


def fx_mul(a: Fx, b: Fx) -> Fx:
    _check_same(a, b)
    return Fx(int(mul_raw(a.raw, b.raw, a.fmt)), a.fmt)


def fx_neg(a: Fx) -> Fx:
    return Fx(int(saturate_raw(-a.raw, a.fmt)), a.fmt)


@lru_cache(maxsize=None)
def _tanh_table(fmt: QFormat, unsigned_mode: str) -> np.ndarray:
    x = fmt.codes() * fmt.scale
    if fmt.signed:
        y = np.tanh(x)
    elif unsigned_mode == "shift":
        y = (np.tanh(x) + 1.0) / 2.0
    elif unsigned_mode == "clip":
        y = np.maximum(np.tanh(x), 0.0)
    else:
        raise ValueError(f"unknown unsigned tanh mode {unsigned_mode!r}")
    table = quantize_raw(y, fmt)
    table.setflags(write=False)
    return table


def tanh_table(fmt: QFormat = Q3_5, unsigned_mode: str = "shift") -> np.ndarray:
    """Lookup table indexed by ``raw - fmt.min_raw``.

    ``unsigned_mode`` only matters for unsigned formats: ``"shift"`` stores
    ``(tanh(x) + 1) / 2``, ``"clip"`` stores ``max(tanh(x), 0)``.
    """
    return _tanh_table(fmt, unsigned_mode)


def tanh_raw(raw, fmt: QFormat = Q3_5, unsigned_mode: str = "shift"):
    table = tanh_table(fmt, unsigned_mode)
    return table[np.asarray(raw, dtype=np.int64) - fmt.min_raw]


def fx_tanh(x: Fx, unsigned_mode: str = "shift") -> Fx:
    return Fx(int(tanh_raw(x.raw, x.fmt, unsigned_mode)), x.fmt)
