"""Shared power-distribution-network voltage model.

Attacker and victim draw current from one supply.  The supply is a
first-order low-pass toward ``v_nom - r_eff * load`` with additive Gaussian
noise.  Two voltages come out of every step:

``v``
    the filtered supply voltage, which is what the delay sensor sees;
``v_inst``
    the instantaneous loaded level ``v_target + noise`` at the logic drawing
    the current, which is what decides timing faults in the DSP slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:  # optional accelerator for long traces; results match the Python loop
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


@dataclass(frozen=True)
class PdnConfig:
    v_nom: float = 1.0
    r_eff: float = 0.005  # volts per load unit
    tau_cycles: float = 3.0
    noise_sigma: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.v_nom <= 0:
            raise ValueError("v_nom must be positive")
        if self.r_eff < 0:
            raise ValueError("r_eff must be non-negative")
        if self.tau_cycles < 1:
            raise ValueError("tau_cycles must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def alpha(self) -> float:
        """Per-cycle filter coefficient ``1 - exp(-1 / tau)``."""
        return 1.0 - math.exp(-1.0 / self.tau_cycles)


@dataclass(frozen=True)
class VoltageState:
    v: float
    v_inst: float
    cycle: int = 0


def initial_state(cfg: PdnConfig = PdnConfig()) -> VoltageState:
    return VoltageState(cfg.v_nom, cfg.v_nom, 0)


def target_voltage(attacker_load, victim_load, cfg: PdnConfig = PdnConfig()):
    return cfg.v_nom - cfg.r_eff * (attacker_load + victim_load)


def step(
    state: VoltageState,
    attacker_load: float,
    victim_load: float,
    rng: np.random.Generator,
    cfg: PdnConfig = PdnConfig(),
) -> VoltageState:
    """Advance the supply by one main cycle.

    Draws exactly one standard normal from ``rng`` (also when
    ``noise_sigma`` is 0) so the noise stream stays aligned across configs.
    """
    if attacker_load < 0 or victim_load < 0:
        raise ValueError("loads must be non-negative")
    v_target = target_voltage(attacker_load, victim_load, cfg)
    noise = cfg.noise_sigma * rng.standard_normal()
    v = state.v + (v_target - state.v) * cfg.alpha + noise
    return VoltageState(v, v_target + noise, state.cycle + 1)


def steady_drop(load: float, cfg: PdnConfig = PdnConfig()) -> float:
    """Noise-free droop once a constant ``load`` has settled."""
    return cfg.r_eff * load


def calibrate(cells_for_full_fault: float, drop_at_full: float, i_cell: float = 1e-3) -> float:
    """``r_eff`` that makes ``cells_for_full_fault`` striker cells drop the supply by ``drop_at_full``.

    ``i_cell`` is the load of one cell (default: one unit per 1,000 cells).
    """
    if cells_for_full_fault <= 0 or drop_at_full <= 0 or i_cell <= 0:
        raise ValueError("arguments must be positive")
    return drop_at_full / (cells_for_full_fault * i_cell)


def _filter_py(v_target, noise, v0, alpha):
    v = np.empty(v_target.size)
    cur = v0
    for t in range(v_target.size):
        cur = cur + (v_target[t] - cur) * alpha + noise[t]
        v[t] = cur
    return v


_filter = njit(cache=True)(_filter_py) if njit is not None else _filter_py


def trace(
    attacker_load: np.ndarray,
    victim_load: np.ndarray,
    noise: np.ndarray,
    cfg: PdnConfig = PdnConfig(),
    v0: float | None = None,
) -> tuple:
    """Vectorised :func:`step` over whole load traces.

    ``noise`` holds the standard-normal draws, one per cycle.  Returns
    ``(v, v_inst)``, bit-identical to iterating :func:`step`.
    """
    v_target = target_voltage(
        np.asarray(attacker_load, dtype=np.float64), np.asarray(victim_load, dtype=np.float64), cfg
    )
    scaled = cfg.noise_sigma * np.asarray(noise, dtype=np.float64)
    v = _filter(v_target, scaled, cfg.v_nom if v0 is None else float(v0), cfg.alpha)
    return v, v_target + scaled
