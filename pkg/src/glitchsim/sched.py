"""Attack scheduler: scheme files, the layer-start detector and the strike controller.

Scheme text format::

    f_sram_hz=100000000
    0*800 1*2 0*98 1*2

The first line gives the rate at which scheme bits are read out; the second
is a run-length list of ``<bit>*<len>`` tokens.  One bit covers one signal-RAM
cycle, so ``N`` leading zeros delay the first strike by ``N / f_sram_hz``
seconds.
"""

from __future__ import annotations

import bisect
import re
from dataclasses import dataclass, field

import numpy as np

MAX_SCHEME_BITS = 10**8
DEFAULT_F_SRAM = 100_000_000

IDLE, ARMED, TRIGGERED = "IDLE", "ARMED", "TRIGGERED"


class SchemeSyntaxError(SyntaxError):
    pass


class LengthOverflow(ValueError):
    pass


class ArgumentOverflow(ValueError):
    pass


_HEADER = re.compile(r"^f_sram_hz=([0-9]+)$")
_TOKEN = re.compile(r"^([01])\*([0-9]+)$")


def _canonical_runs(runs) -> tuple:
    """Drop empty runs and merge neighbours holding the same bit."""
    out = []
    for bit, n in runs:
        if n <= 0:
            continue
        if out and out[-1][0] == bit:
            out[-1] = (bit, out[-1][1] + n)
        else:
            out.append((bit, n))
    return tuple(out)


@dataclass(frozen=True)
class AttackScheme:
    """Per-cycle striker enable bits, stored run-length encoded."""

    runs: tuple
    f_sram_hz: int = DEFAULT_F_SRAM
    _ends: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        runs = _canonical_runs((int(b), int(n)) for b, n in self.runs)
        if not runs:
            raise ValueError("a scheme needs at least one bit")
        if any(b not in (0, 1) for b, _ in runs):
            raise ValueError("scheme bits must be 0 or 1")
        if self.f_sram_hz <= 0:
            raise ValueError("f_sram_hz must be positive")
        ends = tuple(np.cumsum([n for _, n in runs]).tolist())
        if ends[-1] > MAX_SCHEME_BITS:
            raise LengthOverflow(f"scheme expands to {ends[-1]} bits (limit {MAX_SCHEME_BITS})")
        object.__setattr__(self, "runs", runs)
        object.__setattr__(self, "_ends", ends)

    @classmethod
    def from_bits(cls, bits, f_sram_hz: int = DEFAULT_F_SRAM) -> "AttackScheme":
        bits = np.asarray(bits, dtype=np.int64).reshape(-1)
        if bits.size == 0:
            raise ValueError("a scheme needs at least one bit")
        change = np.flatnonzero(np.diff(bits)) + 1
        starts = np.concatenate([[0], change])
        lengths = np.diff(np.concatenate([starts, [bits.size]]))
        return cls(tuple(zip(bits[starts].tolist(), lengths.tolist())), f_sram_hz)

    @classmethod
    def from_offsets(cls, offsets, length: int | None = None, f_sram_hz: int = DEFAULT_F_SRAM):
        """Scheme whose enabled bits are exactly ``offsets`` (zeros elsewhere)."""
        offsets = np.unique(np.asarray(offsets, dtype=np.int64))
        if offsets.size and offsets[0] < 0:
            raise ValueError("offsets must be non-negative")
        total = int(offsets[-1]) + 1 if offsets.size else 0
        length = total if length is None else int(length)
        if length < total or length < 1:
            raise ValueError("length too short for the offsets")
        runs = []
        cursor = 0
        for off in offsets.tolist():
            runs.append((0, off - cursor))
            runs.append((1, 1))
            cursor = off + 1
        runs.append((0, length - cursor))
        return cls(tuple(runs), f_sram_hz)

    def __len__(self):
        return self._ends[-1]

    @property
    def bits(self) -> np.ndarray:
        return np.repeat([b for b, _ in self.runs], [n for _, n in self.runs]).astype(np.uint8)

    @property
    def attack_delay(self) -> int:
        """Length of the leading zero run."""
        return self.runs[0][1] if self.runs[0][0] == 0 else 0

    @property
    def pulses(self) -> list:
        """``(start, length)`` of every run of ones."""
        out = []
        start = 0
        for bit, n in self.runs:
            if bit:
                out.append((start, n))
            start += n
        return out

    @property
    def count(self) -> int:
        return len(self.pulses)

    def bit_at(self, index: int) -> int:
        if not 0 <= index < len(self):
            return 0
        return self.runs[bisect.bisect_right(self._ends, index)][0]

    def enabled_offsets(self) -> np.ndarray:
        """Indices of all set bits, ascending."""
        parts = [np.arange(s, s + n) for s, n in self.pulses]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def pause_seconds(self) -> float:
        return self.attack_delay / self.f_sram_hz


def parse_scheme(text: str) -> AttackScheme:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise SchemeSyntaxError("expected a header line and one line of run tokens")
    m = _HEADER.match(lines[0])
    if not m:
        raise SchemeSyntaxError(f"bad header {lines[0]!r}")
    f_sram = int(m.group(1))
    if f_sram <= 0:
        raise SchemeSyntaxError("f_sram_hz must be positive")
    runs = []
    total = 0
    for tok in lines[1].split():
        t = _TOKEN.match(tok)
        if not t:
            raise SchemeSyntaxError(f"bad token {tok!r}")
        n = int(t.group(2))
        if n == 0:
            raise SchemeSyntaxError(f"zero-length run {tok!r}")
        total += n
        if total > MAX_SCHEME_BITS:
            raise LengthOverflow(f"scheme expands past {MAX_SCHEME_BITS} bits")
        runs.append((int(t.group(1)), n))
    if not runs:
        raise SchemeSyntaxError("no run tokens")
    return AttackScheme(tuple(runs), f_sram)


def render_scheme(scheme: AttackScheme) -> str:
    body = " ".join(f"{b}*{n}" for b, n in scheme.runs)
    return f"f_sram_hz={scheme.f_sram_hz}\n{body}\n"


def load_scheme(path) -> AttackScheme:
    with open(path) as fh:
        return parse_scheme(fh.read())


def make_scheme(
    delay: int, period: int, count: int, spacing: int, f_sram_hz: int = DEFAULT_F_SRAM
) -> AttackScheme:
    """``delay`` zeros, then ``count`` x (``period`` ones, ``spacing`` zeros) without the last gap."""
    if min(delay, period, count, spacing) < 0:
        raise ValueError("scheme parameters must be non-negative")
    if count >= 1 and period < 1:
        raise ValueError("period must be >= 1 when count >= 1")
    total = delay + count * period + max(count - 1, 0) * spacing
    if total > MAX_SCHEME_BITS:
        raise ArgumentOverflow(f"scheme would expand to {total} bits")
    runs = [(0, delay)]
    for i in range(count):
        runs.append((1, period))
        if i < count - 1:
            runs.append((0, spacing))
    return AttackScheme(tuple(runs), f_sram_hz)


# ---------------------------------------------------------------------------
# start detector


@dataclass(frozen=True)
class DetectorConfig:
    idle_hw: int = 4
    trigger_hw: int = 3
    warmup_cycles: int = 16
    debounce_cycles: int = 4

    def __post_init__(self):
        if self.warmup_cycles < 1 or self.debounce_cycles < 1:
            raise ValueError("warmup and debounce must be >= 1")


@dataclass(frozen=True)
class DetectorState:
    fsm: str = IDLE
    counter: int = 0
    run_start: int = -1
    trigger_cycle: int | None = None
    cycle: int = 0  # samples consumed so far


def detector_step(state: DetectorState, tap_word: int, cfg: DetectorConfig = DetectorConfig()) -> tuple:
    """Feed one tap word; returns ``(new_state, triggered)``.

    IDLE arms after ``warmup_cycles`` consecutive idle-weight samples.  ARMED
    triggers after ``debounce_cycles`` consecutive samples at or below
    ``trigger_hw``; ``trigger_cycle`` is the first sample of that run.
    TRIGGERED is absorbing.
    """
    hw = int(tap_word).bit_count()
    now = state.cycle
    nxt = state.cycle + 1
    if state.fsm == TRIGGERED:
        return DetectorState(TRIGGERED, 0, state.run_start, state.trigger_cycle, nxt), True
    if state.fsm == IDLE:
        counter = state.counter + 1 if hw == cfg.idle_hw else 0
        if counter >= cfg.warmup_cycles:
            return DetectorState(ARMED, 0, -1, None, nxt), False
        return DetectorState(IDLE, counter, -1, None, nxt), False
    if hw <= cfg.trigger_hw:
        run_start = now if state.counter == 0 else state.run_start
        counter = state.counter + 1
        if counter >= cfg.debounce_cycles:
            return DetectorState(TRIGGERED, 0, run_start, run_start, nxt), True
        return DetectorState(ARMED, counter, run_start, None, nxt), False
    return DetectorState(ARMED, 0, -1, None, nxt), False


def detector_reset(state: DetectorState | None = None) -> DetectorState:
    return DetectorState(cycle=0 if state is None else state.cycle)


def run_detector(hw: np.ndarray, cfg: DetectorConfig = DetectorConfig(), state: DetectorState | None = None):
    """Feed a Hamming-weight sequence; returns ``(state, confirm_index)``.

    ``confirm_index`` is the position in ``hw`` at which the detector entered
    TRIGGERED, or -1.  Equivalent to repeated :func:`detector_step`.
    """
    st = state or DetectorState()
    fsm, counter, run_start, cycle = st.fsm, st.counter, st.run_start, st.cycle
    if fsm == TRIGGERED:
        return DetectorState(TRIGGERED, 0, run_start, st.trigger_cycle, cycle + len(hw)), -1
    for i, h in enumerate(np.asarray(hw).tolist()):
        if fsm == IDLE:
            counter = counter + 1 if h == cfg.idle_hw else 0
            if counter >= cfg.warmup_cycles:
                fsm, counter = ARMED, 0
        elif h <= cfg.trigger_hw:
            if counter == 0:
                run_start = cycle + i
            counter += 1
            if counter >= cfg.debounce_cycles:
                return DetectorState(TRIGGERED, 0, run_start, run_start, cycle + i + 1), i
        else:
            counter, run_start = 0, -1
    return DetectorState(fsm, counter, run_start if fsm == ARMED else -1, None, cycle + len(hw)), -1


# ---------------------------------------------------------------------------
# controller


def controller_step(
    scheme: AttackScheme, cycles_since_trigger: int | None, f_main: int = DEFAULT_F_SRAM
) -> int:
    """Striker enable for a main cycle ``cycles_since_trigger`` after the trigger.

    ``None`` or a negative value means the detector has not fired yet.
    """
    if cycles_since_trigger is None or cycles_since_trigger < 0:
        return 0
    return scheme.bit_at((cycles_since_trigger * scheme.f_sram_hz) // int(f_main))


def enabled_cycles(
    scheme: AttackScheme, trigger_cycle: int, first: int, end: int, f_main: int = DEFAULT_F_SRAM
) -> np.ndarray:
    """Main cycles in ``[first, end)`` at which :func:`controller_step` enables the striker."""
    if first >= end:
        return np.zeros(0, dtype=np.int64)
    if scheme.f_sram_hz == f_main:
        cyc = trigger_cycle + scheme.enabled_offsets()
        return cyc[(cyc >= first) & (cyc < end)]
    t = np.arange(max(first, trigger_cycle), end, dtype=np.int64)
    idx = ((t - trigger_cycle) * scheme.f_sram_hz) // int(f_main)
    ends = np.asarray(scheme._ends)
    inside = idx < ends[-1]
    pos = np.searchsorted(ends, idx[inside], side="right")
    bits = np.asarray([b for b, _ in scheme.runs])[pos]
    return t[inside][bits == 1]
