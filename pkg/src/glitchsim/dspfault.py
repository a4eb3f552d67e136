"""DSP slice pipeline and voltage-dependent timing-fault model.

A slice computes ``(a + b) * c``.  When a strike is active and the supply at
the slice sags far enough, an op may fault in one of two ways:

duplication
    the slice emits the last correct result it produced (the current
    product is late and becomes the "last correct" result for the next op);
random
    the slice emits a code drawn uniformly from the output format.

Every exposed op consumes exactly three uniforms ``(u_fault, u_kind, u_code)``
from the fault stream, faulted or not, so runs stay aligned across configs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import pdn
from .accel import DUPLICATION, RANDOM, DspOpRecord, FaultEvent, product_format
from .fxp import Fx, QFormat, add_raw, fx_add, fx_mul

PIPELINE_DEPTH = 5
DRAWS_PER_OP = 3


@dataclass(frozen=True)
class FaultConfig:
    v_nom: float = 1.0
    v_safe: float = 0.065  # droop (V) at which faults begin
    v_width: float = 0.05  # droop range (V) over which probability ramps 0 -> 1
    rho_dup: float = 0.5
    rho_dup_per_slice: tuple | None = None
    exposure: float = 1.0  # fraction of the fault probability reaching a datapath op
    zero_operand_immune: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.v_width <= 0:
            raise ValueError("v_width must be positive")
        if not 0 <= self.rho_dup <= 1:
            raise ValueError("rho_dup must lie in [0, 1]")
        if not 0 <= self.exposure <= 1:
            raise ValueError("exposure must lie in [0, 1]")
        if self.rho_dup_per_slice is not None:
            rho = tuple(float(r) for r in self.rho_dup_per_slice)
            if not rho or any(not 0 <= r <= 1 for r in rho):
                raise ValueError("per-slice rho_dup values must lie in [0, 1]")
            object.__setattr__(self, "rho_dup_per_slice", rho)

    def rho_for(self, slice_id):
        """Duplication share for one slice id (scalar or array)."""
        if self.rho_dup_per_slice is None:
            return np.full(np.shape(slice_id), self.rho_dup) if np.ndim(slice_id) else self.rho_dup
        rho = np.asarray(self.rho_dup_per_slice)
        out = rho[np.asarray(slice_id) % rho.size]
        return out if np.ndim(out) else float(out)


def random_slice_profile(n_slices: int, seed: int = 0, spread: float = 0.25) -> tuple:
    """Per-slice duplication shares scattered uniformly around 0.5."""
    rng = np.random.default_rng(seed)
    return tuple(np.clip(0.5 + rng.uniform(-spread, spread, n_slices), 0.0, 1.0).tolist())


def fault_probability(v, cfg: FaultConfig = FaultConfig()):
    """``clamp(((v_nom - v) - v_safe) / v_width, 0, 1)``; scalar or array."""
    p = np.clip(((cfg.v_nom - np.asarray(v, dtype=np.float64)) - cfg.v_safe) / cfg.v_width, 0.0, 1.0)
    return p if np.ndim(p) else float(p)


def dsp_op(a: Fx, b: Fx, c: Fx, out_fmt: QFormat | None = None) -> Fx:
    """``(a + b) * c``.

    With ``out_fmt`` unset every stage saturates in the operand format.  With
    ``out_fmt`` set the pre-adder still saturates in the operand format but
    the product is kept at full width (raw ``s * c``) in ``out_fmt``.
    """
    s = fx_add(a, b)
    if out_fmt is None:
        return fx_mul(s, c)
    if c.fmt != a.fmt:
        raise ValueError("operands must share a format")
    return Fx(s.raw * c.raw, out_fmt)


def random_code(u, fmt: QFormat):
    """Map a uniform in [0, 1) to a code of ``fmt``, all codes equally likely."""
    idx = np.floor(np.asarray(u, dtype=np.float64) * fmt.n_codes).astype(np.int64)
    out = fmt.min_raw + np.minimum(idx, fmt.n_codes - 1)
    return out if np.ndim(out) else int(out)


def decide(u_fault, u_kind, p, rho, exposed=True, cfg: FaultConfig = FaultConfig()):
    """Fault kind from the canonical draws: -1 for none, else DUPLICATION / RANDOM.

    Works elementwise on arrays.
    """
    hit = np.asarray(exposed) & (np.asarray(u_fault) < cfg.exposure * np.asarray(p))
    kind = np.where(np.asarray(u_kind) < rho, DUPLICATION, RANDOM)
    out = np.where(hit, kind, -1)
    return out if np.ndim(out) else int(out)


@dataclass
class DspSlice:
    """One DSP slice: a 5-deep result pipeline plus the last correct result.

    ``cycle`` counts DSP cycles.  :meth:`tick` advances it and returns the
    results that became visible.
    """

    slice_id: int = 0
    fmt: QFormat = field(default_factory=QFormat)
    rho_dup: float = 0.5
    depth: int = PIPELINE_DEPTH
    cycle: int = 0
    last_correct: Fx = None
    pipeline: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.last_correct is None:
            self.last_correct = Fx(0, product_format(self.fmt))

    @property
    def out_fmt(self) -> QFormat:
        return self.last_correct.fmt

    def push(self, op, emitted: Fx):
        self.pipeline.append((self.cycle + self.depth, op, emitted))

    def tick(self, n: int = 1) -> list:
        self.cycle += n
        done = []
        while self.pipeline and self.pipeline[0][0] <= self.cycle:
            done.append(self.pipeline.popleft()[1:])
        return done

    def flush(self) -> list:
        done = [item[1:] for item in self.pipeline]
        self.pipeline.clear()
        self.cycle += self.depth
        return done


def execute(
    slice_: DspSlice,
    op: DspOpRecord,
    v: float,
    strike_active: bool,
    rng: np.random.Generator | None,
    cfg: FaultConfig = FaultConfig(),
    force: int | None = None,
) -> tuple:
    """Issue one op on ``slice_``; returns ``(emitted, event_or_None)``.

    Uniforms are drawn only when ``strike_active``.  ``force`` (DUPLICATION or
    RANDOM) overrides the probabilistic decision, for hand-built traces; a
    forced random fault still needs ``rng`` for its code.
    """
    out_fmt = slice_.out_fmt
    correct = dsp_op(op.a, op.b, op.c, out_fmt)
    kind = -1
    if strike_active or force is not None:
        u = rng.random(DRAWS_PER_OP) if rng is not None else np.zeros(DRAWS_PER_OP)
        if force is not None:
            kind = force
        else:
            exposed = not (cfg.zero_operand_immune and add_raw(op.a.raw, op.b.raw, op.a.fmt) == 0)
            kind = decide(u[0], u[1], fault_probability(v, cfg), slice_.rho_dup, exposed, cfg)
    if kind == -1:
        emitted = correct
        slice_.last_correct = correct
    elif kind == DUPLICATION:
        emitted = slice_.last_correct
        slice_.last_correct = correct
    else:
        emitted = Fx(random_code(u[2], out_fmt), out_fmt)
    slice_.push(op, emitted)
    if kind == -1:
        return emitted, None
    event = FaultEvent(op.cycle, slice_.slice_id, op.layer_id, op.op_index, int(kind), correct.raw, emitted.raw)
    return emitted, event


# ---------------------------------------------------------------------------
# characterization


def characterization_droop(n_cells, pdn_cfg: pdn.PdnConfig, i_cell: float = 1.0, victim_load: float = 1.0):
    """Noise-free droop at the slice when ``n_cells`` striker cells fire next to one busy op."""
    return pdn_cfg.r_eff * (np.asarray(n_cells, dtype=np.float64) * i_cell / 1000.0 + victim_load)


def _rates(n_cells: int, trials: int, cfg: FaultConfig, pdn_cfg: pdn.PdnConfig, seed: int, fmt: QFormat):
    rng = np.random.default_rng(seed)  # same draws at every cell count
    z = rng.standard_normal(trials)
    u = rng.random((trials, DRAWS_PER_OP))
    ops = rng.integers(fmt.min_raw, fmt.max_raw + 1, size=(trials, 3))
    ops[:, 1] = 0  # b input idles as in the accelerator mapping
    droop = characterization_droop(n_cells, pdn_cfg)
    v = pdn_cfg.v_nom - droop + pdn_cfg.noise_sigma * z
    exposed = ~cfg.zero_operand_immune | (add_raw(ops[:, 0], ops[:, 1], fmt) != 0)
    kind = decide(u[:, 0], u[:, 1], fault_probability(v, cfg), cfg.rho_for(np.zeros(trials, dtype=int)), exposed, cfg)
    dup = int(np.count_nonzero(kind == DUPLICATION))
    rnd = int(np.count_nonzero(kind == RANDOM))
    return dup, rnd


def characterize(
    n_cells_grid,
    trials: int = 10_000,
    cfg: FaultConfig = FaultConfig(),
    pdn_cfg: pdn.PdnConfig = pdn.PdnConfig(),
    seeds=(0,),
    fmt: QFormat = QFormat(),
) -> list:
    """Single-strike fault rates per cell count.

    Each trial issues one random op on a slice while the striker fires for one
    main cycle.  The slice sees the instantaneous supply under the striker plus
    the op's own load, with supply noise.  Returns rows
    ``(n_cells, dup_rate, rand_rate, total_rate)`` pooled over ``seeds``,
    with ``total_rate`` defined as ``dup_rate + rand_rate``.  A seed replays
    the same ops, noise and uniforms at every cell count, so each trial's
    outcome is monotone in the cell count and so are the rates.
    """
    grid = [int(n) for n in n_cells_grid]
    if not grid:
        raise ValueError("n_cells_grid must not be empty")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seeds = [int(s) for s in seeds] or [cfg.seed]
    rows = []
    denom = trials * len(seeds)
    for n in grid:
        dup = rnd = 0
        for s in seeds:
            d, r = _rates(n, trials, cfg, pdn_cfg, s, fmt)
            dup += d
            rnd += r
        d, r = dup / denom, rnd / denom
        rows.append((n, d, r, d + r))
    return rows


def characterize_reference(n_cells: int, trials: int, cfg: FaultConfig, pdn_cfg: pdn.PdnConfig, seed: int, fmt: QFormat = QFormat()):
    """Trial-by-trial version of one characterization point via :func:`execute`.

    Returns ``(dup_count, rand_count)``; matches the vectorised path.
    """
    rng = np.random.default_rng(seed)  # same draws at every cell count
    z = rng.standard_normal(trials)
    u = rng.random((trials, DRAWS_PER_OP))
    ops = rng.integers(fmt.min_raw, fmt.max_raw + 1, size=(trials, 3))
    droop = float(characterization_droop(n_cells, pdn_cfg))
    sl = DspSlice(0, fmt, float(cfg.rho_for(0)))
    zero = Fx(0, fmt)
    dup = rnd = 0
    for t in range(trials):
        v = pdn_cfg.v_nom - droop + pdn_cfg.noise_sigma * z[t]
        op = DspOpRecord(0, t, Fx(int(ops[t, 0]), fmt), zero, Fx(int(ops[t, 2]), fmt), t, 0)
        _, ev = execute(sl, op, v, True, _Replay(u[t]), cfg)
        if ev is not None:
            dup += ev.kind == DUPLICATION
            rnd += ev.kind == RANDOM
    return dup, rnd


class _Replay:
    """Stand-in generator returning pre-drawn uniforms."""

    def __init__(self, values):
        self.values = np.asarray(values)

    def random(self, n):
        assert n == self.values.size
        return self.values.copy()
