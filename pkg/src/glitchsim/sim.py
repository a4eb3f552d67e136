"""Co-simulation of the victim accelerator, the shared supply and the attacker.

One main cycle is 10 ns.  Per cycle the victim draws its schedule load, the
striker draws its load when the controller enables it, the supply advances,
the delay sensor is sampled and feeds the start detector, and every DSP op
issued in the cycle may fault according to the supply level it sees.

Two engines produce identical results:

``fast``
    array based.  The striker cannot fire before the detector confirms, so
    the supply trace up to that point needs no striker load; the detector is
    run over it, the enable set follows from the scheme, then the full supply
    trace is recomputed with the striker and only ops in struck cycles are
    examined.
``reference``
    a plain per-cycle loop over :func:`pdn.step`, :func:`tdc.sample`,
    :func:`sched.detector_step` and :func:`dspfault.execute`.

Random streams per run are ``default_rng([seed, image_id, stream])`` with one
stream each for supply noise, sensor bubbles, fault draws and blind strike
placement.  The controller acts on the detector state at the end of the
previous cycle, so scheme bits that fall before the trigger is confirmed
(the first ``debounce_cycles - 1`` offsets) are never played.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import accel, dspfault, pdn, sched, striker, tdc
from .accel import CONV, FC, POOL, DspOpRecord, FaultLog, LayerFaults, QuantizedModel
from .fxp import Fx

NOISE, TDC, FAULT, BLIND = 0, 1, 2, 3
DEFAULT_EXPOSURE = 0.035


@dataclass(frozen=True)
class SimConfig:
    f_main: int = 100_000_000
    lead_in_cycles: int = 64  # idle cycles before the first layer starts
    pdn: pdn.PdnConfig = field(default_factory=pdn.PdnConfig)
    tdc: tdc.TdcConfig = field(default_factory=tdc.TdcConfig)
    striker: striker.StrikerConfig = field(default_factory=striker.StrikerConfig)
    detector: sched.DetectorConfig = field(default_factory=sched.DetectorConfig)
    fault: dspfault.FaultConfig = field(default_factory=lambda: dspfault.FaultConfig(exposure=DEFAULT_EXPOSURE))
    schedule: accel.ScheduleConfig = field(default_factory=accel.ScheduleConfig)
    seed: int = 0
    trace_enabled: bool = False
    spacing: str = "even"  # guided strike placement: even | random
    engine: str = "fast"  # fast | reference
    tdc_chunk: int = 512

    def __post_init__(self):
        if self.f_main <= 0:
            raise ValueError("f_main must be positive")
        if self.lead_in_cycles < 0:
            raise ValueError("lead_in_cycles must be non-negative")
        if self.spacing not in ("even", "random"):
            raise ValueError("spacing must be 'even' or 'random'")
        if self.engine not in ("fast", "reference"):
            raise ValueError("engine must be 'fast' or 'reference'")

    @property
    def f_dsp(self) -> int:
        return 2 * self.f_main

    @property
    def f_sram(self) -> int:
        return self.f_main

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)


@dataclass(eq=False)
class SimTrace:
    """Outcome of one simulated inference.

    The per-cycle arrays (``v``, ``count``, ``taps``, ``layer``, ``enable``)
    are filled only when tracing is enabled.
    """

    prediction: int
    scores: np.ndarray
    faults: FaultLog
    strike_cycles: np.ndarray
    trigger_cycle: int | None = None
    confirm_cycle: int | None = None
    total_cycles: int = 0
    v: np.ndarray | None = None
    count: np.ndarray | None = None
    taps: np.ndarray | None = None
    layer: np.ndarray | None = None
    enable: np.ndarray | None = None

    @property
    def n_faults(self) -> int:
        return len(self.faults)

    def __eq__(self, other):
        if not isinstance(other, SimTrace):
            return NotImplemented
        scalars = ("prediction", "trigger_cycle", "confirm_cycle", "total_cycles")
        if any(getattr(self, k) != getattr(other, k) for k in scalars):
            return False
        if self.faults != other.faults:
            return False
        for k in ("scores", "strike_cycles", "v", "count", "taps", "layer", "enable"):
            a, b = getattr(self, k), getattr(other, k)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    def rows(self):
        """Trace records ``(cycle, v, count, taps, layer, enable)``."""
        if self.v is None:
            raise ValueError("run was not traced")
        return zip(
            range(self.total_cycles),
            self.v.tolist(),
            self.count.tolist(),
            self.taps.tolist(),
            self.layer.tolist(),
            self.enable.tolist(),
        )


@dataclass(frozen=True)
class Timeline:
    """Victim schedule shifted by the idle lead-in."""

    schedule: accel.LayerSchedule
    lead_in: int

    @property
    def total_cycles(self) -> int:
        return self.lead_in + self.schedule.total_cycles

    def window(self, key) -> tuple:
        """Absolute ``(start, end)`` cycles of a layer."""
        w = self.schedule.window(key)
        return self.lead_in + w.start, self.lead_in + w.end

    def victim_load(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.lead_in), accel.victim_load_trace(self.schedule)])

    def layer_ids(self) -> np.ndarray:
        return np.concatenate([np.full(self.lead_in, -1, dtype=np.int64), self.schedule.layer_ids()])


def timeline(model: QuantizedModel, cfg: SimConfig = SimConfig()) -> Timeline:
    return Timeline(accel.compile_schedule(model, cfg.schedule), cfg.lead_in_cycles)


def streams(seed: int, image_id: int) -> dict:
    return {k: np.random.default_rng([int(seed), int(image_id), k]) for k in (NOISE, TDC, FAULT, BLIND)}


# ---------------------------------------------------------------------------
# fast engine


def _detect(v: np.ndarray, cfg: SimConfig, rng: np.random.Generator) -> tuple:
    """Feed the sensor and detector until the trigger confirms.

    Returns ``(trigger_cycle, confirm_cycle)``, both ``None`` if it never fires.
    """
    state = sched.DetectorState()
    for lo in range(0, v.size, cfg.tdc_chunk):
        _, words = tdc.trace(v[lo : lo + cfg.tdc_chunk], cfg.tdc, rng)
        state, idx = sched.run_detector(tdc.tap_hw(words), cfg.detector, state)
        if idx >= 0:
            return state.trigger_cycle, lo + idx
    return None, None


def _layer_faults(layer, par, first_op, ops, cyc, u, p, cfg: dspfault.FaultConfig, pfmt):
    """Callable resolving one layer's faults on its actual input."""

    def resolve(x):
        exposed = True
        if cfg.zero_operand_immune:
            a, _ = accel.op_operands(layer, x, ops)
            exposed = np.asarray(a) != 0
        kind = dspfault.decide(u[:, 0], u[:, 1], p, cfg.rho_for(ops % par), exposed, cfg)
        hit = kind >= 0
        return LayerFaults(ops[hit], kind[hit], dspfault.random_code(u[hit, 2], pfmt), cyc[hit])

    return resolve


def _fault_plan(model, tl: Timeline, strikes: np.ndarray, v_inst: np.ndarray, cfg: SimConfig, rng) -> dict:
    """Per-layer fault resolvers for every op issued in a struck cycle.

    Draws ``rng.random(3)`` per such op, in cycle order and op order within a
    cycle.
    """
    pfmt = accel.product_format(model.fmt)
    plan = {}
    per_layer = []
    for w in tl.schedule.windows:
        if w.kind == POOL:
            continue
        start, end = tl.lead_in + w.start, tl.lead_in + w.end
        cyc = strikes[(strikes >= start) & (strikes < end)]
        if not cyc.size:
            continue
        lo = (cyc - start) * w.parallelism
        n = np.minimum(w.parallelism, w.op_count - lo)
        ops = np.repeat(lo, n) + (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n))
        per_layer.append((w, np.repeat(cyc, n), ops))
    total = sum(ops.size for _, _, ops in per_layer)
    u_all = rng.random((total, dspfault.DRAWS_PER_OP))
    pos = 0
    for w, cyc, ops in per_layer:
        u = u_all[pos : pos + ops.size]
        pos += ops.size
        p = dspfault.fault_probability(v_inst[cyc], cfg.fault)
        plan[w.layer_id] = _layer_faults(model.layers[w.layer_id], w.parallelism, 0, ops, cyc, u, p, cfg.fault, pfmt)
    return plan


def _run_fast(model, image, cfg: SimConfig, tl: Timeline, image_id, scheme=None, strikes=None, clean=None):
    rngs = streams(cfg.seed, image_id)
    T = tl.total_cycles
    victim = tl.victim_load()
    z = rngs[NOISE].standard_normal(T)
    trigger = confirm = None
    if scheme is not None:
        v0, _ = pdn.trace(np.zeros(T), victim, z, cfg.pdn)
        trigger, confirm = _detect(v0, cfg, rngs[TDC])
        if trigger is None:
            strikes = np.zeros(0, dtype=np.int64)
        else:
            strikes = sched.enabled_cycles(scheme, trigger, confirm + 1, T, cfg.f_main)
    enable = np.zeros(T, dtype=bool)
    enable[strikes] = True
    att = striker.load_trace(enable, cfg.striker)
    v, v_inst = pdn.trace(att, victim, z, cfg.pdn)
    x0 = accel.image_to_raw(image, model.fmt).reshape(model.input_shape)
    plan = _fault_plan(model, tl, strikes, v_inst, cfg, rngs[FAULT]) if strikes.size else {}
    acts, log, _ = accel.forward_faulted(model, x0, plan, tl.schedule, clean=clean)
    scores = acts[-1].reshape(-1)
    out = SimTrace(accel.predict_scores(scores), scores, log, strikes, trigger, confirm, T)
    if cfg.trace_enabled:
        # fresh sensor stream: same uniforms per cycle as the detection pass
        counts, words = tdc.trace(v, cfg.tdc, streams(cfg.seed, image_id)[TDC])
        out.v, out.count, out.taps, out.layer, out.enable = v, counts, words, tl.layer_ids(), enable.astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# reference engine


def _run_reference(model, image, cfg: SimConfig, tl: Timeline, image_id, scheme=None, strikes=None):
    rngs = streams(cfg.seed, image_id)
    T = tl.total_cycles
    fmt = model.fmt
    pfmt = accel.product_format(fmt)
    victim = tl.victim_load()
    layer_of = tl.layer_ids()
    struck = set() if strikes is None else set(np.asarray(strikes).tolist())
    slices = [
        dspfault.DspSlice(s, fmt, float(cfg.fault.rho_for(s))) for s in range(tl.schedule.n_slices)
    ]
    zero = Fx(0, fmt)
    x = accel.image_to_raw(image, fmt).reshape(model.input_shape)
    emitted = None
    state = pdn.initial_state(cfg.pdn)
    det = sched.DetectorState()
    run = 0
    events = []
    vs, counts, words, enables = [], [], [], []
    for t in range(T):
        if scheme is not None:
            since = None if det.fsm != sched.TRIGGERED else t - det.trigger_cycle
            en = sched.controller_step(scheme, since, cfg.f_main)
        else:
            en = int(t in struck)
        run = run + 1 if en else 0
        att = striker.load(en, cfg.striker, run)
        state = pdn.step(state, att, victim[t], rngs[NOISE], cfg.pdn)
        raw = tdc.sample(state.v, cfg.tdc, rngs[TDC])
        word = tdc.tap(raw, cfg.tdc.taps)
        enables.append(en)
        if cfg.trace_enabled:
            vs.append(state.v)
            counts.append(tdc.encode(raw))
            words.append(word)
        if scheme is not None:
            det, _ = sched.detector_step(det, word, cfg.detector)
        lid = int(layer_of[t])
        if lid < 0:
            continue
        win = tl.schedule.windows[lid]
        layer = model.layers[lid]
        t_rel = t - tl.lead_in
        if t_rel == win.start and layer.kind != POOL:
            emitted = np.zeros(win.op_count, dtype=np.int64)
        if layer.kind != POOL:
            for k in win.op_range(t_rel):
                a, c = accel.op_operands(layer, x, k)
                op = DspOpRecord(lid, k, Fx(int(a), fmt), zero, Fx(int(c), fmt), t, k % win.parallelism)
                val, ev = dspfault.execute(
                    slices[op.slice_id], op, state.v_inst, bool(en), rngs[FAULT], cfg.fault
                )
                emitted[k] = val.raw
                if ev is not None:
                    events.append(ev)
        if t_rel == win.end - 1:
            if layer.kind == POOL:
                x = accel._pool(layer, x[None])[0]
            else:
                acc = emitted.reshape(layer.dims[0], -1, layer.terms_per_output()).sum(axis=2)
                x = accel._finish_one(model, lid, acc)
    assert all(s.out_fmt == pfmt for s in slices)
    scores = x.reshape(-1)
    strike_arr = np.flatnonzero(np.asarray(enables)).astype(np.int64)
    trigger = det.trigger_cycle if scheme is not None else None
    confirm = None
    if trigger is not None:
        confirm = trigger + cfg.detector.debounce_cycles - 1
    out = SimTrace(accel.predict_scores(scores), scores, FaultLog.from_events(events), strike_arr, trigger, confirm, T)
    if cfg.trace_enabled:
        out.v = np.asarray(vs)
        out.count = np.asarray(counts, dtype=np.int64)
        out.taps = np.asarray(words, dtype=np.int64)
        out.layer = layer_of
        out.enable = np.asarray(enables, dtype=np.uint8)
    return out


# ---------------------------------------------------------------------------
# public entry points


def _engine(cfg: SimConfig):
    return _run_fast if cfg.engine == "fast" else _run_reference


def run_guided(model: QuantizedModel, image, scheme: sched.AttackScheme, cfg: SimConfig = SimConfig(), image_id: int = 0, clean=None) -> SimTrace:
    """Detector-triggered attack replaying ``scheme``."""
    tl = timeline(model, cfg)
    if cfg.engine == "fast":
        return _run_fast(model, image, cfg, tl, image_id, scheme=scheme, clean=clean)
    return _run_reference(model, image, cfg, tl, image_id, scheme=scheme)


def blind_strikes(n_strikes: int, total_cycles: int, rng: np.random.Generator) -> np.ndarray:
    if n_strikes < 0:
        raise ValueError("n_strikes must be non-negative")
    if n_strikes > total_cycles:
        raise sched.ArgumentOverflow(f"{n_strikes} strikes exceed the {total_cycles}-cycle timeline")
    return np.sort(rng.choice(total_cycles, n_strikes, replace=False)).astype(np.int64)


def run_blind(model: QuantizedModel, image, n_strikes: int, cfg: SimConfig = SimConfig(), image_id: int = 0, clean=None) -> SimTrace:
    """Strikes on ``n_strikes`` distinct cycles drawn uniformly over the timeline."""
    tl = timeline(model, cfg)
    strikes = blind_strikes(n_strikes, tl.total_cycles, streams(cfg.seed, image_id)[BLIND])
    if cfg.engine == "fast":
        return _run_fast(model, image, cfg, tl, image_id, strikes=strikes, clean=clean)
    return _run_reference(model, image, cfg, tl, image_id, strikes=strikes)


def run_strikes(model: QuantizedModel, image, strikes, cfg: SimConfig = SimConfig(), image_id: int = 0, clean=None) -> SimTrace:
    """Strikes on explicit absolute cycles, no detector."""
    tl = timeline(model, cfg)
    strikes = np.unique(np.asarray(strikes, dtype=np.int64))
    if strikes.size and (strikes[0] < 0 or strikes[-1] >= tl.total_cycles):
        raise ValueError("strike cycles must lie on the timeline")
    if cfg.engine == "fast":
        return _run_fast(model, image, cfg, tl, image_id, strikes=strikes, clean=clean)
    return _run_reference(model, image, cfg, tl, image_id, strikes=strikes)


def quiet(cfg: SimConfig) -> SimConfig:
    """``cfg`` without supply noise or sensor bubbles."""
    return cfg.replace(
        pdn=dataclasses.replace(cfg.pdn, noise_sigma=0.0),
        tdc=dataclasses.replace(cfg.tdc, bubble_prob=0.0),
    )


def profile_trigger(model: QuantizedModel, cfg: SimConfig = SimConfig()) -> int:
    """Trigger cycle of a noise-free run: the attacker's profiling reference."""
    tl = timeline(model, cfg)
    v, _ = pdn.trace(np.zeros(tl.total_cycles), tl.victim_load(), np.zeros(tl.total_cycles), quiet(cfg).pdn)
    trigger, _ = _detect(v, quiet(cfg), np.random.default_rng(0))
    if trigger is None:
        raise RuntimeError("detector never fires on the noise-free profile")
    return trigger


def strike_offsets(start: int, end: int, n: int, spacing: str = "even", rng=None) -> np.ndarray:
    """``n`` distinct cycles in ``[start, end)``: evenly spaced or uniformly random."""
    dur = end - start
    if n > dur:
        raise sched.ArgumentOverflow(f"{n} strikes exceed the {dur}-cycle window")
    if spacing == "even":
        return start + (np.arange(n, dtype=np.int64) * dur) // max(n, 1)
    return start + np.sort(rng.choice(dur, n, replace=False)).astype(np.int64)


def guided_scheme(model: QuantizedModel, layer, n_strikes: int, cfg: SimConfig = SimConfig(), trigger: int | None = None, rng=None) -> sched.AttackScheme:
    """Scheme placing ``n_strikes`` one-cycle strikes inside a layer's window.

    Offsets count from the profiled trigger.  Cycles before the detector can
    confirm are dropped from the window, and ``n_strikes`` above the
    remaining window length is clipped to it.
    """
    tl = timeline(model, cfg)
    trigger = profile_trigger(model, cfg) if trigger is None else trigger
    start, end = tl.window(layer)
    # the controller plays nothing before the detector confirms
    start = max(start, trigger + cfg.detector.debounce_cycles)
    if start >= end:
        raise ValueError("target window ends before the detector can confirm")
    n = min(int(n_strikes), end - start)
    offs = strike_offsets(start, end, n, cfg.spacing, rng) - trigger
    return sched.AttackScheme.from_offsets(offs, length=max(end - trigger, 1), f_sram_hz=cfg.f_sram)


# ---------------------------------------------------------------------------
# accuracy sweeps

SWEEP_COLUMNS = ("layer", "mode", "n_strikes", "seed", "accuracy")
SUMMARY_COLUMNS = ("layer", "mode", "n_strikes", "mean_accuracy", "std_accuracy", "mean_drop")


def _clean_slices(model, images, chunk: int = 100):
    """Yield ``(offset, per-image clean pass)`` over ``images`` in chunks."""
    for lo in range(0, len(images), chunk):
        x = accel.image_to_raw(images[lo : lo + chunk], model.fmt)
        acts, accs = accel.clean_pass_batch(model, x)
        for j in range(len(x)):
            yield lo + j, ([a[j] for a in acts], [None if a is None else a[j] for a in accs])


def _sweep_point(args) -> tuple:
    model, images, labels, layer, mode, n, seed, cfg, trigger = args
    cfg = cfg.replace(seed=int(seed), trace_enabled=False)
    correct = 0
    if mode == "guided":
        rng = np.random.default_rng([int(seed), int(n), 4])
        scheme = guided_scheme(model, layer, n, cfg, trigger, rng)
        for i, clean in _clean_slices(model, images):
            correct += run_guided(model, images[i], scheme, cfg, i, clean).prediction == labels[i]
    else:
        for i, clean in _clean_slices(model, images):
            correct += run_blind(model, images[i], n, cfg, i, clean).prediction == labels[i]
    return correct / len(images)


def layer_name(model: QuantizedModel, layer) -> str:
    return model.names[layer] if isinstance(layer, (int, np.integer)) else str(layer)


def sweep_accuracy(
    model: QuantizedModel,
    images,
    labels,
    target_layer,
    strike_grid,
    cfg: SimConfig = SimConfig(),
    seeds=(0,),
    mode: str = "guided",
    jobs: int = 1,
) -> list:
    """Accuracy under attack for every ``(n_strikes, seed)`` pair.

    Guided runs strike ``n`` evenly spaced cycles of ``target_layer``'s
    window (clipped to the window length); blind runs strike ``n`` cycles
    anywhere on the timeline.  Returns rows in :data:`SWEEP_COLUMNS` order,
    sorted by ``(n_strikes, seed)`` whatever ``jobs`` is.
    """
    if mode not in ("guided", "blind"):
        raise ValueError("mode must be 'guided' or 'blind'")
    grid = [int(n) for n in strike_grid]
    if grid != sorted(grid):
        raise ValueError("strike_grid must be sorted")
    if grid and grid[0] < 0:
        raise ValueError("strike counts must be non-negative")
    images = np.asarray(images)
    labels = np.asarray(labels)
    name = layer_name(model, target_layer) if mode == "guided" else "all"
    trigger = profile_trigger(model, cfg) if mode == "guided" else None
    tasks = [
        (model, images, labels, target_layer, mode, n, s, cfg, trigger) for n in grid for s in seeds
    ]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            accs = list(pool.map(_sweep_point, tasks))
    else:
        accs = [_sweep_point(t) for t in tasks]
    rows = [(name, mode, t[5], int(t[6]), float(a)) for t, a in zip(tasks, accs)]
    return sorted(rows, key=lambda r: (r[2], r[3]))


def summarize(rows, baseline: float | None = None) -> list:
    """Mean and population std of accuracy per ``(layer, mode, n_strikes)``.

    ``mean_drop`` is relative to ``baseline`` (or the ``n_strikes == 0``
    row of the same group when present, else NaN).
    """
    groups = {}
    for layer, mode, n, _, acc in rows:
        groups.setdefault((layer, mode, n), []).append(acc)
    out = []
    for (layer, mode, n), accs in sorted(groups.items()):
        base = baseline
        if base is None and (layer, mode, 0) in groups:
            base = float(np.mean(groups[(layer, mode, 0)]))
        mean = float(np.mean(accs))
        drop = float("nan") if base is None else base - mean
        out.append((layer, mode, n, mean, float(np.std(accs)), drop))
    return out
