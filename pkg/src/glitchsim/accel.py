"""Victim accelerator model.

A quantized LeNet-5 is mapped onto a stream of DSP operations.  Every
multiply-accumulate term becomes one ``(a + b) * c`` DSP op with ``a`` the
input activation, ``b = 0`` and ``c`` the weight.  As in a hardware MAC slice
the product leaves the multiplier at full width (see :func:`product_format`)
and is summed exactly in a wide accumulator; only the final per-output sum
plus bias is rounded and saturated to the model format.  Pooling is done by
comparators and never touches a DSP slice.

Op ordering inside a layer is output-major, term-minor.  Op ``k`` of a layer
with parallelism ``P`` is issued on slice ``k % P`` at main cycle
``start + k // P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .fxp import Q3_5, Fx, QFormat, quantize_raw, saturate_raw, shift_round_even, tanh_raw

CONV, POOL, FC = "conv", "pool", "fc"
KINDS = (CONV, POOL, FC)

DUPLICATION, RANDOM = 0, 1
FAULT_KIND_NAMES = {DUPLICATION: "Duplication", RANDOM: "Random"}


class ShapeMismatch(ValueError):
    pass


@dataclass(eq=False)
class Layer:
    """One layer of a quantized model.

    ``dims`` is kind specific: conv ``(out_ch, in_ch, kh, kw)``, pool
    ``(channels, kh, kw, stride)``, fc ``(out, in, 1, 1)``.  Weights and
    biases hold raw codes.
    """

    kind: str
    dims: tuple
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 4:
            raise ValueError("dims must have four entries")
        self.weights = np.asarray(self.weights, dtype=np.int64).reshape(self.weight_shape)
        self.bias = np.asarray(self.bias, dtype=np.int64).reshape(self.bias_shape)
        if self.kind == POOL:
            self.activation = "none"

    @property
    def weight_shape(self) -> tuple:
        if self.kind == CONV:
            return self.dims
        if self.kind == FC:
            return self.dims[:2]
        return (0,)

    @property
    def bias_shape(self) -> tuple:
        return (0,) if self.kind == POOL else (self.dims[0],)

    @property
    def is_dsp(self) -> bool:
        return self.kind != POOL

    def output_shape(self, in_shape: tuple) -> tuple:
        if self.kind == CONV:
            oc, ic, kh, kw = self.dims
            if len(in_shape) != 3 or in_shape[0] != ic:
                raise ShapeMismatch(f"conv expects ({ic}, H, W), got {in_shape}")
            h, w = in_shape[1] - kh + 1, in_shape[2] - kw + 1
            if h < 1 or w < 1:
                raise ShapeMismatch(f"kernel larger than input {in_shape}")
            return (oc, h, w)
        if self.kind == POOL:
            c, kh, kw, stride = self.dims
            if len(in_shape) != 3 or in_shape[0] != c:
                raise ShapeMismatch(f"pool expects ({c}, H, W), got {in_shape}")
            return (c, (in_shape[1] - kh) // stride + 1, (in_shape[2] - kw) // stride + 1)
        out, n_in = self.dims[:2]
        if math.prod(in_shape) != n_in:
            raise ShapeMismatch(f"fc expects {n_in} inputs, got shape {in_shape}")
        return (out,)

    def terms_per_output(self) -> int:
        if self.kind == CONV:
            return self.dims[1] * self.dims[2] * self.dims[3]
        if self.kind == FC:
            return self.dims[1]
        return self.dims[1] * self.dims[2] - 1

    def op_count(self, in_shape: tuple) -> int:
        return math.prod(self.output_shape(in_shape)) * self.terms_per_output()


@dataclass(eq=False)
class QuantizedModel:
    layers: list
    fmt: QFormat = Q3_5
    input_shape: tuple = (1, 28, 28)
    names: list = field(default=None)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(self.input_shape)
        if self.names is None:
            self.names = default_layer_names(self.layers)
        self._shapes = None
        self.shapes()  # validates composition
        for layer in self.layers:
            for arr in (layer.weights, layer.bias):
                if arr.size and (arr.min() < self.fmt.min_raw or arr.max() > self.fmt.max_raw):
                    raise ValueError("weights outside the model format")

    def shapes(self) -> list:
        """Input shape of every layer followed by the output shape."""
        if self._shapes is None:
            shapes = [self.input_shape]
            for layer in self.layers:
                shapes.append(layer.output_shape(shapes[-1]))
            self._shapes = shapes
        return list(self._shapes)

    def op_counts(self) -> list:
        shapes = self.shapes()
        return [layer.op_count(shapes[i]) for i, layer in enumerate(self.layers)]

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        if (self.fmt, self.input_shape, len(self.layers)) != (
            other.fmt,
            other.input_shape,
            len(other.layers),
        ):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.kind, a.dims, a.activation) != (b.kind, b.dims, b.activation):
                return False
            if not (np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)):
                return False
        return True


def default_layer_names(layers: Sequence[Layer]) -> list:
    counters = {CONV: 0, POOL: 0, FC: 0}
    prefix = {CONV: "Conv", POOL: "Pool", FC: "FC"}
    names = []
    for layer in layers:
        counters[layer.kind] += 1
        names.append(f"{prefix[layer.kind]}{counters[layer.kind]}")
    return names


def lenet_dims() -> list:
    """(kind, dims, activation) of the victim LeNet-5 topology."""
    return [
        (CONV, (6, 1, 5, 5), "tanh"),
        (POOL, (6, 2, 2, 2), "none"),
        (CONV, (16, 6, 5, 5), "tanh"),
        (FC, (120, 1024, 1, 1), "tanh"),
        (FC, (10, 120, 1, 1), "none"),
    ]


def zero_lenet(fmt: QFormat = Q3_5) -> QuantizedModel:
    """LeNet-5 with every weight and bias zero."""
    layers = []
    for kind, dims, act in lenet_dims():
        n_w = 0 if kind == POOL else math.prod(dims if kind == CONV else dims[:2])
        n_b = 0 if kind == POOL else dims[0]
        layers.append(Layer(kind, dims, np.zeros(n_w), np.zeros(n_b), act))
    return QuantizedModel(layers, fmt)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    conv_parallelism: int = 8
    fc_parallelism: int = 4
    pool_parallelism: int = 4
    stall_cycles: int = 1000
    i_dsp: float = 1.0
    i_cmp: float = 0.15

    def parallelism(self, kind: str) -> int:
        return {CONV: self.conv_parallelism, FC: self.fc_parallelism, POOL: self.pool_parallelism}[
            kind
        ]


@dataclass(frozen=True)
class LayerWindow:
    layer_id: int
    name: str
    kind: str
    start: int
    end: int
    parallelism: int
    op_count: int

    @property
    def duration(self) -> int:
        return self.end - self.start

    def ops_at(self, cycle: int) -> int:
        """Ops issued at ``cycle`` (0 outside the window)."""
        if not self.start <= cycle < self.end:
            return 0
        done = (cycle - self.start) * self.parallelism
        return min(self.parallelism, self.op_count - done)

    def op_range(self, cycle: int) -> range:
        """Flat op indices issued at ``cycle``."""
        if not self.start <= cycle < self.end:
            return range(0)
        lo = (cycle - self.start) * self.parallelism
        return range(lo, min(lo + self.parallelism, self.op_count))


@dataclass(frozen=True)
class LayerSchedule:
    windows: tuple
    stall_cycles: int
    i_dsp: float = 1.0
    i_cmp: float = 0.15

    @property
    def total_cycles(self) -> int:
        return self.windows[-1].end if self.windows else 0

    @property
    def n_slices(self) -> int:
        return max((w.parallelism for w in self.windows if w.kind != POOL), default=1)

    def window(self, key) -> LayerWindow:
        for w in self.windows:
            if w.name == key or w.layer_id == key:
                return w
        raise KeyError(key)

    def layer_at(self, cycle: int) -> int:
        """Layer id active at ``cycle``, or -1 during stalls and outside."""
        for w in self.windows:
            if w.start <= cycle < w.end:
                return w.layer_id
        return -1

    def layer_ids(self) -> np.ndarray:
        ids = np.full(self.total_cycles, -1, dtype=np.int64)
        for w in self.windows:
            ids[w.start : w.end] = w.layer_id
        return ids


def compile_schedule(model: QuantizedModel, cfg: ScheduleConfig = ScheduleConfig()) -> LayerSchedule:
    windows = []
    cursor = 0
    for i, (layer, ops) in enumerate(zip(model.layers, model.op_counts())):
        par = cfg.parallelism(layer.kind)
        if par < 1:
            raise ValueError("parallelism must be >= 1")
        if i:
            cursor += cfg.stall_cycles
        dur = -(-ops // par)
        windows.append(LayerWindow(i, model.names[i], layer.kind, cursor, cursor + dur, par, ops))
        cursor += dur
    return LayerSchedule(tuple(windows), cfg.stall_cycles, cfg.i_dsp, cfg.i_cmp)


def victim_load(schedule: LayerSchedule, cycle: int) -> float:
    if not 0 <= cycle < schedule.total_cycles:
        raise ValueError(f"cycle {cycle} outside timeline")
    for w in schedule.windows:
        n = w.ops_at(cycle)
        if n:
            return (schedule.i_cmp if w.kind == POOL else schedule.i_dsp) * n
    return 0.0


def victim_load_trace(schedule: LayerSchedule) -> np.ndarray:
    """``victim_load`` for every cycle of the timeline."""
    load = np.zeros(schedule.total_cycles)
    for w in schedule.windows:
        counts = np.full(w.duration, w.parallelism, dtype=np.float64)
        counts[-1] = w.op_count - (w.duration - 1) * w.parallelism
        unit = schedule.i_cmp if w.kind == POOL else schedule.i_dsp
        load[w.start : w.end] = unit * counts
    return load


# ---------------------------------------------------------------------------
# inference


def product_format(fmt: QFormat) -> QFormat:
    """Format holding every product of two ``fmt`` values exactly."""
    if 2 * fmt.total_bits > 32:
        raise ValueError(f"{fmt} is too wide for an exact product format")
    return QFormat(2 * fmt.total_bits, 2 * fmt.integer_bits, fmt.signed)


@dataclass(frozen=True)
class DspOpRecord:
    layer_id: int
    op_index: int
    a: Fx
    b: Fx
    c: Fx
    cycle: int
    slice_id: int


def image_to_raw(image, fmt: QFormat = Q3_5) -> np.ndarray:
    """Map 8-bit pixels to the model format via ``pixel / 256``."""
    return quantize_raw(np.asarray(image, dtype=np.float64) / 256.0, fmt)


def _columns(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Operands of a DSP layer for a batch ``x`` of shape (B, C, H, W).

    Returns (B, spatial_outputs, terms); term order is (in_ch, ky, kx).
    """
    if layer.kind == FC:
        return x.reshape(x.shape[0], 1, -1)
    _, ic, kh, kw = layer.dims
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, oh, ow = x.shape[0], win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, ic * kh * kw)


def _weight_matrix(layer: Layer) -> np.ndarray:
    return layer.weights.reshape(layer.dims[0], -1)


def accumulate(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Exact sums of products, shape (B, out_ch, spatial), in product LSBs.

    Operands are at most 16 bits wide, so every partial sum is an integer far
    below 2**53 and a float64 matrix product is exact.
    """
    cols = _columns(layer, x).astype(np.float64)
    w = _weight_matrix(layer).astype(np.float64)
    acc = np.matmul(cols, w.T)  # (B, S, oc)
    return np.rint(acc).astype(np.int64).transpose(0, 2, 1)


def finish(layer: Layer, acc: np.ndarray, fmt: QFormat) -> np.ndarray:
    """Add bias, round to ``fmt``, saturate and apply the activation.

    ``acc`` has shape (..., out_ch, spatial) in product LSBs.
    """
    f = fmt.frac_bits
    pre = shift_round_even(acc + (layer.bias[:, None] << f), f)
    pre = saturate_raw(pre, fmt)
    if layer.activation == "tanh":
        pre = tanh_raw(pre, fmt)
    return pre


def _pool(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Max pooling for a batch (B, C, H, W)."""
    c, kh, kw, stride = layer.dims
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride].max(axis=(4, 5))


def _out_shape(model: QuantizedModel, i: int, batch: int) -> tuple:
    return (batch,) + tuple(model.shapes()[i + 1])


def clean_pass_batch(model: QuantizedModel, x: np.ndarray) -> tuple:
    """Fault-free pass over a batch of raw inputs (B, *input_shape).

    Returns ``(activations, accumulators)``: ``activations[0]`` is the input
    and ``activations[i + 1]`` the output of layer ``i``; ``accumulators[i]``
    is the flat pre-bias sum of DSP layer ``i`` per image (``None`` for
    pooling layers).
    """
    x = np.asarray(x, dtype=np.int64).reshape((-1,) + tuple(model.input_shape))
    acts, accs = [x], []
    for i, layer in enumerate(model.layers):
        if layer.kind == POOL:
            acts.append(_pool(layer, acts[-1]))
            accs.append(None)
            continue
        acc = accumulate(layer, acts[-1])
        accs.append(acc.reshape(len(x), -1))
        acts.append(finish(layer, acc, model.fmt).reshape(_out_shape(model, i, len(x))))
    return acts, accs


def clean_pass(model: QuantizedModel, x: np.ndarray) -> tuple:
    """Single-image :func:`clean_pass_batch` with the batch axis removed."""
    acts, accs = clean_pass_batch(model, np.asarray(x)[None])
    return [a[0] for a in acts], [None if a is None else a[0] for a in accs]


def forward_raw(model: QuantizedModel, x: np.ndarray) -> list:
    """Fault-free forward pass; returns the activation after every layer."""
    return clean_pass(model, x)[0]


def predict_scores(scores: np.ndarray) -> int:
    """argmax with ties broken toward the lowest class index."""
    return int(np.argmax(scores))


def _check_image(model: QuantizedModel, image: np.ndarray):
    if image.shape != tuple(model.input_shape[1:]) and image.shape != model.input_shape:
        raise ShapeMismatch(f"image shape {image.shape} != {model.input_shape}")


def infer(model: QuantizedModel, image) -> tuple:
    image = np.asarray(image)
    _check_image(model, image)
    scores = forward_raw(model, image_to_raw(image, model.fmt))[-1]
    return scores, predict_scores(scores)


def scores_batch(model: QuantizedModel, images, chunk: int = 500) -> np.ndarray:
    """Raw output scores for a stack of images."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), chunk):
        x = image_to_raw(images[i : i + chunk], model.fmt)
        out.append(clean_pass_batch(model, x)[0][-1].reshape(len(x), -1))
    if not out:
        return np.zeros((0, model.shapes()[-1][0]), dtype=np.int64)
    return np.concatenate(out)


def infer_batch(model: QuantizedModel, images) -> np.ndarray:
    return np.argmax(scores_batch(model, images), axis=1)


def op_operands(layer: Layer, x: np.ndarray, k) -> tuple:
    """Raw ``(activation, weight)`` operands of flat op(s) ``k`` for one image."""
    k = np.asarray(k, dtype=np.int64)
    terms = layer.terms_per_output()
    out, t = np.divmod(k, terms)
    if layer.kind == FC:
        return x.reshape(-1)[t], layer.weights[out, t]
    _, _, kh, kw = layer.dims
    oh, ow = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    oc, sp = np.divmod(out, oh * ow)
    oy, ox = np.divmod(sp, ow)
    ic, r = np.divmod(t, kh * kw)
    ky, kx = np.divmod(r, kw)
    return x[ic, oy + ky, ox + kx], layer.weights[oc, ic, ky, kx]


def op_products(layer: Layer, x: np.ndarray, k) -> np.ndarray:
    """Correct product-format results of flat op(s) ``k``."""
    a, c = op_operands(layer, x, k)
    return np.asarray(a, dtype=np.int64) * c


Hook = Callable[[DspOpRecord, Fx], Fx]


def infer_with_hook(
    model: QuantizedModel,
    image,
    hook: Hook | None = None,
    schedule: LayerSchedule | None = None,
) -> tuple:
    """Op-by-op inference where every DSP product passes through ``hook``.

    The hook receives the op record and the correct result (an :class:`Fx` in
    :func:`product_format`) and returns the value the accumulator will add.
    Returns ``(scores, prediction)`` with scores as a list of :class:`Fx`.
    """
    image = np.asarray(image)
    _check_image(model, image)
    fmt = model.fmt
    if hook is None:
        scores, pred = infer(model, image)
        return [Fx(int(s), fmt) for s in scores], pred
    pfmt = product_format(fmt)
    schedule = schedule or compile_schedule(model)
    x = image_to_raw(image, fmt).reshape((1,) + tuple(model.input_shape))
    zero = Fx(0, fmt)
    for i, layer in enumerate(model.layers):
        if layer.kind == POOL:
            x = _pool(layer, x)
            continue
        win = schedule.windows[i]
        cols = _columns(layer, x)[0]
        w = _weight_matrix(layer)
        terms = layer.terms_per_output()
        n_sp = cols.shape[0]
        emitted = np.empty(layer.dims[0] * n_sp * terms, dtype=np.int64)
        for k in range(emitted.size):
            out, t = divmod(k, terms)
            oc, sp = divmod(out, n_sp)
            a, c = int(cols[sp, t]), int(w[oc, t])
            rec = DspOpRecord(
                i,
                k,
                Fx(a, fmt),
                zero,
                Fx(c, fmt),
                win.start + k // win.parallelism,
                k % win.parallelism,
            )
            result = hook(rec, Fx(a * c, pfmt))
            if result.fmt != pfmt:
                raise ValueError(f"hook must return a {pfmt} value")
            emitted[k] = result.raw
        acc = emitted.reshape(1, layer.dims[0], n_sp, terms).sum(axis=3)
        x = finish(layer, acc, fmt).reshape(_out_shape(model, i, 1))
    scores = x.reshape(-1)
    return [Fx(int(s), fmt) for s in scores], predict_scores(scores)


# ---------------------------------------------------------------------------
# fault-injected inference (vectorised path used by the simulator)


@dataclass
class LayerFaults:
    """Faulted ops of one layer, sorted by op index.

    ``random_raw`` is the emitted value of random faults in product LSBs
    (ignored for duplication faults).
    """

    op_index: np.ndarray
    kind: np.ndarray
    random_raw: np.ndarray
    cycle: np.ndarray = None

    def __post_init__(self):
        self.op_index = np.asarray(self.op_index, dtype=np.int64)
        self.kind = np.asarray(self.kind, dtype=np.int64)
        self.random_raw = np.asarray(self.random_raw, dtype=np.int64)
        if self.cycle is None:
            self.cycle = np.full(self.op_index.size, -1, dtype=np.int64)
        self.cycle = np.asarray(self.cycle, dtype=np.int64)
        if self.op_index.size > 1 and np.any(np.diff(self.op_index) <= 0):
            raise ValueError("fault op indices must be strictly increasing")

    def __len__(self):
        return int(self.op_index.size)


@dataclass(frozen=True)
class FaultEvent:
    cycle: int
    slice_id: int
    layer_id: int
    op_index: int
    kind: int
    correct: int
    emitted: int

    @property
    def kind_name(self) -> str:
        return FAULT_KIND_NAMES[self.kind]


FAULT_LOG_FIELDS = ("cycle", "slice_id", "layer_id", "op_index", "kind", "correct", "emitted")


@dataclass(eq=False)
class FaultLog:
    """Column-oriented list of fault events (one int64 array per field)."""

    cycle: np.ndarray
    slice_id: np.ndarray
    layer_id: np.ndarray
    op_index: np.ndarray
    kind: np.ndarray
    correct: np.ndarray
    emitted: np.ndarray

    @classmethod
    def empty(cls) -> "FaultLog":
        return cls(*(np.zeros(0, dtype=np.int64) for _ in FAULT_LOG_FIELDS))

    @classmethod
    def concat(cls, logs: Sequence["FaultLog"]) -> "FaultLog":
        if not logs:
            return cls.empty()
        return cls(*(np.concatenate([getattr(g, f) for g in logs]) for f in FAULT_LOG_FIELDS))

    @classmethod
    def from_events(cls, events: Sequence[FaultEvent]) -> "FaultLog":
        cols = [np.array([getattr(e, f) for e in events], dtype=np.int64) for f in FAULT_LOG_FIELDS]
        return cls(*cols)

    def __len__(self):
        return int(self.cycle.size)

    def events(self) -> list:
        rows = zip(*(getattr(self, f).tolist() for f in FAULT_LOG_FIELDS))
        return [FaultEvent(*r) for r in rows]

    def counts(self) -> dict:
        return {
            "faults": len(self),
            "duplication": int(np.sum(self.kind == DUPLICATION)),
            "random": int(np.sum(self.kind == RANDOM)),
        }

    def __eq__(self, other):
        if not isinstance(other, FaultLog):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in FAULT_LOG_FIELDS)


def resolve_emitted(
    layer: Layer, x: np.ndarray, lf: LayerFaults, par: int, carry: np.ndarray
) -> tuple:
    """Emitted values of faulted ops and the slices' carry-out.

    A duplication fault emits the most recent correct result produced on the
    same slice.  Every op except a random-faulted one delivers its correct
    result to the slice (a duplication-faulted op's result simply shows up
    one op late), so the source is the latest earlier op on the slice that is
    not random-faulted, or the slice's carry-in from the previous layer.

    Returns ``(correct, emitted, carry_out)``; ``carry`` is not modified.
    """
    n_ops = layer.op_count(x.shape)
    n_steps = -(-n_ops // par)
    ops, kind = lf.op_index, lf.kind
    correct = op_products(layer, x, ops)
    good = np.zeros(n_steps * par, dtype=bool)
    good[:n_ops] = True
    good[ops[kind == RANDOM]] = False
    last = np.where(good, np.arange(good.size), -1).reshape(n_steps, par)
    last = np.maximum.accumulate(last, axis=0)
    emitted = np.where(kind == RANDOM, lf.random_raw, 0)
    dup = np.flatnonzero(kind == DUPLICATION)
    if dup.size:
        step, sl = np.divmod(ops[dup], par)
        src = np.where(step > 0, last[np.maximum(step - 1, 0), sl], -1)
        vals = carry[sl].copy()
        has = src >= 0
        if np.any(has):
            vals[has] = op_products(layer, x, src[has])
        emitted[dup] = vals
    carry_out = carry.copy()
    final = last[-1]
    has = final >= 0
    if np.any(has):
        carry_out[:par][has] = op_products(layer, x, final[has])
    return correct, emitted, carry_out


def slice_carry_out(layer: Layer, x: np.ndarray, par: int, carry: np.ndarray) -> np.ndarray:
    """Carry-out of a fault-free layer: each slice's final product."""
    n_ops = layer.op_count(x.shape)
    out = carry.copy()
    k = np.arange(min(par, n_ops))
    k = k + ((n_ops - 1 - k) // par) * par
    out[: k.size] = op_products(layer, x, k)
    return out


def forward_faulted(
    model: QuantizedModel,
    x0: np.ndarray,
    faults: dict,
    schedule: LayerSchedule,
    clean: tuple | None = None,
    carry: np.ndarray | None = None,
) -> tuple:
    """Forward pass of one image with faults applied to selected DSP products.

    ``faults`` maps layer id to :class:`LayerFaults`, or to a callable taking
    the layer's actual input and returning one (for faults that depend on
    operand values).  Slice state (the last
    correct result per slice) starts at ``carry`` (zeros by default) and
    carries across layers.  ``clean`` is an optional cached
    :func:`clean_pass` result for ``x0``; layers whose inputs are unchanged
    reuse it.

    Returns ``(activations, fault_log, carry_out)``.
    """
    fmt = model.fmt
    x0 = np.asarray(x0, dtype=np.int64).reshape(model.input_shape)
    if clean is None:
        clean = clean_pass(model, x0)
    clean_acts, clean_accs = clean
    acts = [x0]
    logs = []
    carry = np.zeros(schedule.n_slices, dtype=np.int64) if carry is None else carry.copy()
    pristine = True
    for i, layer in enumerate(model.layers):
        x = acts[-1]
        lf = faults.get(i)
        if callable(lf):
            lf = lf(x)
        if layer.kind == POOL:
            acts.append(clean_acts[i + 1] if pristine else _pool(layer, x[None])[0])
            continue
        par = schedule.windows[i].parallelism
        if not lf:
            y = clean_acts[i + 1] if pristine else _finish_one(model, i, accumulate(layer, x[None]))
            carry = slice_carry_out(layer, x, par, carry)
            acts.append(y)
            continue
        acc = clean_accs[i].copy() if pristine else accumulate(layer, x[None]).reshape(-1)
        correct, emitted, carry = resolve_emitted(layer, x, lf, par, carry)
        np.add.at(acc, lf.op_index // layer.terms_per_output(), emitted - correct)
        y = _finish_one(model, i, acc)
        if pristine and not np.array_equal(y, clean_acts[i + 1]):
            pristine = False
        logs.append(
            FaultLog(
                lf.cycle,
                lf.op_index % par,
                np.full(len(lf), i, dtype=np.int64),
                lf.op_index,
                lf.kind,
                correct,
                emitted,
            )
        )
        acts.append(y)
    return acts, FaultLog.concat(logs), carry


def _finish_one(model: QuantizedModel, i: int, acc: np.ndarray) -> np.ndarray:
    layer = model.layers[i]
    acc = np.asarray(acc).reshape(layer.dims[0], -1)
    return finish(layer, acc, model.fmt).reshape(model.shapes()[i + 1])
