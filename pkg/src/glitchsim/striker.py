"""Power-striker cell array modeled as an enable-gated electrical load."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StrikerConfig:
    n_cells: int = 8000  # about 15% of the LUTs of a mid-size Zynq part
    i_cell: float = 1.0  # load units per 1,000 cells
    ramp_cycles: int = 0  # 0: full load on the first enabled cycle

    def __post_init__(self):
        if self.n_cells < 0:
            raise ValueError("n_cells must be non-negative")
        if self.i_cell < 0:
            raise ValueError("i_cell must be non-negative")
        if self.ramp_cycles < 0:
            raise ValueError("ramp_cycles must be non-negative")

    @property
    def full_load(self) -> float:
        return self.n_cells * self.i_cell / 1000.0


def load(enable, cfg: StrikerConfig = StrikerConfig(), run_length: int = 1) -> float:
    """Load drawn this cycle.

    ``run_length`` is the number of consecutive enabled cycles up to and
    including this one; it only matters when ``ramp_cycles > 0``.
    """
    if not enable:
        return 0.0
    if cfg.ramp_cycles and run_length < cfg.ramp_cycles:
        return cfg.full_load * run_length / cfg.ramp_cycles
    return cfg.full_load


def load_trace(enable: np.ndarray, cfg: StrikerConfig = StrikerConfig()) -> np.ndarray:
    """:func:`load` for every cycle of an enable trace."""
    enable = np.asarray(enable, dtype=bool)
    out = np.where(enable, cfg.full_load, 0.0)
    if cfg.ramp_cycles and enable.any():
        idx = np.arange(enable.size)
        # index of the most recent disabled cycle, so run length = idx - that
        last_off = np.maximum.accumulate(np.where(enable, -1, idx))
        run = idx - last_off
        ramping = enable & (run < cfg.ramp_cycles)
        out[ramping] = cfg.full_load * run[ramping] / cfg.ramp_cycles
    return out
