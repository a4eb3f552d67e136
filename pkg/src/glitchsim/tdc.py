"""Time-to-digital converter delay sensor.

A clock edge races down a carry chain; the number of stages it passes in one
sampling period shrinks as the supply droops.  The latched chain is a
thermometer code (``count`` ones, then zeros) with occasional bubbles.  The
readout is the popcount, and five fixed taps give the start detector its
coarse zone word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IndexOutOfRange(IndexError):
    pass


DEFAULT_TAPS = (40, 55, 70, 85, 96)
BUBBLE_SCALE = 1 << 16  # bubble probability resolution: 2**-16


@dataclass(frozen=True)
class TdcConfig:
    f_dr: float = 200e6
    l_lut: int = 4
    l_carry: int = 128
    b0: int = 90
    gain: float = 300.0  # bins per volt of droop
    bubble_prob: float = 0.002
    v_nom: float = 1.0
    taps: tuple = DEFAULT_TAPS

    def __post_init__(self):
        if self.l_carry != 128:
            raise ValueError("this sensor model is built for a 128-stage carry chain")
        if not 0 <= self.b0 <= self.l_carry:
            raise ValueError("b0 must lie in [0, l_carry]")
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if not 0 <= self.bubble_prob <= 1:
            raise ValueError("bubble_prob must lie in [0, 1]")
        object.__setattr__(self, "taps", tuple(int(p) for p in self.taps))
        _check_positions(self.taps, self.l_carry)

    @property
    def bubble_threshold(self) -> int:
        """A stage flips when its 16-bit uniform draw falls below this."""
        return int(round(self.bubble_prob * BUBBLE_SCALE))

    @property
    def theta(self) -> float:
        """Phase offset, as a fraction of the driving period, that puts ``b0`` ones in the chain."""
        return self.b0 / self.l_carry


@dataclass(frozen=True, eq=False)
class TdcSample:
    raw: np.ndarray
    count: int
    taps: int
    cycle: int = -1


def _check_positions(positions, width: int):
    if len(positions) != 5:
        raise ValueError("exactly five tap positions are required")
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ValueError("tap positions must be strictly increasing")
    if positions[0] < 0 or positions[-1] >= width:
        raise IndexOutOfRange(f"tap positions must lie in [0, {width - 1}]")


def ideal_count(v, cfg: TdcConfig = TdcConfig()):
    """Bubble-free count ``clamp(round(b0 - gain * droop), 0, l_carry)``."""
    k = np.clip(np.rint(cfg.b0 - cfg.gain * (cfg.v_nom - np.asarray(v, dtype=np.float64))), 0, cfg.l_carry)
    return k.astype(np.int64) if np.ndim(k) else int(k)


def thermometer(k: int, width: int = 128) -> np.ndarray:
    return np.arange(width) < k


def sample(v: float, cfg: TdcConfig, rng: np.random.Generator) -> np.ndarray:
    """Raw 128-bit chain for supply ``v``; draws ``l_carry`` 16-bit uniforms from ``rng``."""
    raw = thermometer(ideal_count(v, cfg), cfg.l_carry)
    return raw ^ _flips(cfg, rng, cfg.l_carry)


def _flips(cfg: TdcConfig, rng: np.random.Generator, size):
    u = rng.integers(0, BUBBLE_SCALE, size=size, dtype=np.uint16)
    return u < cfg.bubble_threshold


def encode(raw) -> int:
    """Population count of the chain (robust to bubbles)."""
    if isinstance(raw, (int, np.integer)):
        return int(raw).bit_count()
    return int(np.count_nonzero(raw))


def tap(raw, positions=DEFAULT_TAPS) -> int:
    """5-bit word whose bit ``i`` is ``raw[positions[i]]``."""
    positions = tuple(int(p) for p in positions)
    width = 128 if isinstance(raw, (int, np.integer)) else len(raw)
    _check_positions(positions, width)
    word = 0
    for i, p in enumerate(positions):
        bit = (int(raw) >> p) & 1 if isinstance(raw, (int, np.integer)) else int(bool(raw[p]))
        word |= bit << i
    return word


def hamming_weight(word: int) -> int:
    return int(word).bit_count()


def measure(v: float, cfg: TdcConfig, rng: np.random.Generator, cycle: int = -1) -> TdcSample:
    raw = sample(v, cfg, rng)
    return TdcSample(raw, encode(raw), tap(raw, cfg.taps), cycle)


def trace(v: np.ndarray, cfg: TdcConfig, rng: np.random.Generator) -> tuple:
    """Vectorised :func:`measure` over a voltage trace.

    Consumes the same uniforms as calling :func:`sample` once per entry, so
    the result is identical.  Returns ``(counts, tap_words)``.
    """
    v = np.asarray(v, dtype=np.float64)
    k = ideal_count(v, cfg).reshape(-1)
    flips = _flips(cfg, rng, (v.size, cfg.l_carry))
    # bubbles are sparse: correct the ideal code at the flipped positions only
    rows, cols = np.nonzero(flips)
    delta = np.where(cols < k[rows], -1, 1)
    counts = k + np.bincount(rows, weights=delta, minlength=v.size).astype(np.int64)
    taps = np.asarray(cfg.taps)
    bits = (taps[None, :] < k[:, None]) ^ flips[:, taps]
    words = bits @ (1 << np.arange(len(taps)))
    return counts.astype(np.int64), words.astype(np.int64)


def tap_hw(words: np.ndarray) -> np.ndarray:
    """Hamming weight of each 5-bit tap word."""
    words = np.asarray(words, dtype=np.int64)
    return sum((words >> i) & 1 for i in range(5))
