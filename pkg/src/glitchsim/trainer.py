"""Float LeNet-5 training (plain mini-batch SGD) and post-training quantization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .accel import CONV, FC, POOL, Layer, QuantizedModel, image_to_raw, lenet_dims
from .fxp import Q3_5, QFormat, quantize_raw

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


@dataclass(eq=False)
class FloatModel:
    conv1_w: np.ndarray  # (6, 1, 5, 5)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (16, 6, 5, 5)
    conv2_b: np.ndarray
    fc1_w: np.ndarray  # (120, 1024)
    fc1_b: np.ndarray
    fc2_w: np.ndarray  # (10, 120)
    fc2_b: np.ndarray

    SHAPES = {
        "conv1_w": (6, 1, 5, 5),
        "conv1_b": (6,),
        "conv2_w": (16, 6, 5, 5),
        "conv2_b": (16,),
        "fc1_w": (120, 1024),
        "fc1_b": (120,),
        "fc2_w": (10, 120),
        "fc2_b": (10,),
    }

    def __post_init__(self):
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if arr.shape != self.SHAPES[f.name]:
                raise ShapeMismatch(f"{f.name}: expected {self.SHAPES[f.name]}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{f.name} has non-finite values")
            setattr(self, f.name, arr)

    def params(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "FloatModel":
        return FloatModel(**{k: v.copy() for k, v in self.params().items()})

    def __eq__(self, other):
        if not isinstance(other, FloatModel):
            return NotImplemented
        return all(np.array_equal(v, getattr(other, k)) for k, v in self.params().items())

    @classmethod
    def zeros(cls) -> "FloatModel":
        return cls(**{k: np.zeros(s) for k, s in cls.SHAPES.items()})


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 4
    seed: int = 0
    lr_decay: float = 0.7  # multiplicative, per epoch
    # softmax sees logit_scale * scores, which keeps the learned scores small
    # enough for the fixed-point output format
    logit_scale: float = 4.0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs, self.logit_scale) <= 0:
            raise ValueError("learning_rate, batch_size, epochs and logit_scale must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def init_model(seed: int) -> FloatModel:
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    return FloatModel(
        conv1_w=uniform((6, 1, 5, 5), 25, 150),
        conv1_b=np.zeros(6),
        conv2_w=uniform((16, 6, 5, 5), 150, 400),
        conv2_b=np.zeros(16),
        fc1_w=uniform((120, 1024), 1024, 120),
        fc1_b=np.zeros(120),
        fc2_w=uniform((10, 120), 120, 10),
        fc2_b=np.zeros(10),
    )


# ---------------------------------------------------------------------------
# layer primitives (batched, NCHW)


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B, OH*OW, C*k*k), term order (c, ky, kx)."""
    b, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    oh, ow = h - k + 1, w - k + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)


def col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    b = cols.shape[0]
    oh, ow = h - k + 1, w - k + 1
    cols = cols.reshape(b, oh, ow, c, k, k)
    out = np.zeros((b, c, h, w))
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + oh, kx : kx + ow] += cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return out


def conv_forward(x, w, b):
    oc, ic, k, _ = w.shape
    cols = im2col(x, k)
    out = cols @ w.reshape(oc, -1).T + b
    oh = x.shape[2] - k + 1
    return out.transpose(0, 2, 1).reshape(x.shape[0], oc, oh, -1), cols


def conv_backward(dout, cols, x_shape, w):
    oc, ic, k, _ = w.shape
    bsz = dout.shape[0]
    d = dout.reshape(bsz, oc, -1).transpose(0, 2, 1)  # (B, S, oc)
    dw = np.einsum("bso,bst->ot", d, cols).reshape(w.shape)
    db = d.sum(axis=(0, 1))
    dcols = d @ w.reshape(oc, -1)
    dx = col2im(dcols, ic, x_shape[2], x_shape[3], k)
    return dx, dw, db


def pool_forward(x):
    b, c, h, w = x.shape
    r = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    return np.take_along_axis(r, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(dout, idx, x_shape):
    b, c, h, w = x_shape
    g = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    return g.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1.0
    return loss, grad / len(labels)


def forward(m: FloatModel, x: np.ndarray, keep: bool = False):
    """Batched float forward. ``x`` is (B, 1, 28, 28) in [0, 1)."""
    z1, cols1 = conv_forward(x, m.conv1_w, m.conv1_b)
    a1 = np.tanh(z1)
    p1, pidx = pool_forward(a1)
    z2, cols2 = conv_forward(p1, m.conv2_w, m.conv2_b)
    a2 = np.tanh(z2)
    f = a2.reshape(len(x), -1)
    a3 = np.tanh(f @ m.fc1_w.T + m.fc1_b)
    logits = a3 @ m.fc2_w.T + m.fc2_b
    if not keep:
        return logits
    return logits, dict(x=x, cols1=cols1, a1=a1, pidx=pidx, p1=p1, cols2=cols2, a2=a2, f=f, a3=a3)


def backward(m: FloatModel, dlogits: np.ndarray, cache: dict) -> dict:
    g = {}
    a3 = cache["a3"]
    g["fc2_w"] = dlogits.T @ a3
    g["fc2_b"] = dlogits.sum(axis=0)
    dz3 = (dlogits @ m.fc2_w) * (1 - a3**2)
    g["fc1_w"] = dz3.T @ cache["f"]
    g["fc1_b"] = dz3.sum(axis=0)
    da2 = (dz3 @ m.fc1_w).reshape(cache["a2"].shape)
    dz2 = da2 * (1 - cache["a2"] ** 2)
    dp1, g["conv2_w"], g["conv2_b"] = conv_backward(dz2, cache["cols2"], cache["p1"].shape, m.conv2_w)
    da1 = pool_backward(dp1, cache["pidx"], cache["a1"].shape)
    dz1 = da1 * (1 - cache["a1"] ** 2)
    _, g["conv1_w"], g["conv1_b"] = conv_backward(dz1, cache["cols1"], cache["x"].shape, m.conv1_w)
    return g


def loss_and_grads(m: FloatModel, x: np.ndarray, labels: np.ndarray, logit_scale: float = 1.0):
    logits, cache = forward(m, x, keep=True)
    loss, dlogits = softmax_xent(logit_scale * logits, labels)
    return loss, backward(m, logit_scale * dlogits, cache)


def prepare_images(images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise ShapeMismatch(f"expected (N, 28, 28) images, got {images.shape}")
    return (images.astype(np.float64) / 256.0)[:, None]


def dataset_loss(m: FloatModel, images, labels, logit_scale: float = 1.0, batch: int = 1000) -> float:
    x = prepare_images(images)
    labels = np.asarray(labels, dtype=np.int64)
    total = 0.0
    for i in range(0, len(x), batch):
        loss, _ = softmax_xent(logit_scale * forward(m, x[i : i + batch]), labels[i : i + batch])
        total += loss * len(x[i : i + batch])
    return total / len(x)


def train(images, labels, cfg: TrainConfig = TrainConfig(), init: FloatModel | None = None) -> FloatModel:
    """Mini-batch SGD on softmax cross-entropy; deterministic given ``cfg.seed``."""
    x_all = prepare_images(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x_all) == 0:
        raise ValueError("empty training set")
    if len(labels) != len(x_all):
        raise ShapeMismatch("image and label counts differ")
    m = init.copy() if init is not None else init_model(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_all))
        running = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss, grads = loss_and_grads(m, x_all[idx], labels[idx], cfg.logit_scale)
            running += loss * len(idx)
            for name, grad in grads.items():
                getattr(m, name)[...] -= lr * grad
        log.info("epoch %d: mean train loss %.4f (lr %.4g)", epoch + 1, running / len(order), lr)
        lr *= cfg.lr_decay
    return m


def quantize_model(m: FloatModel, fmt: QFormat = Q3_5) -> QuantizedModel:
    params = {
        0: (m.conv1_w, m.conv1_b),
        2: (m.conv2_w, m.conv2_b),
        3: (m.fc1_w, m.fc1_b),
        4: (m.fc2_w, m.fc2_b),
    }
    layers = []
    for i, (kind, dims, act) in enumerate(lenet_dims()):
        if kind == POOL:
            layers.append(Layer(kind, dims, np.zeros(0), np.zeros(0), act))
        else:
            w, b = params[i]
            layers.append(Layer(kind, dims, quantize_raw(w, fmt), quantize_raw(b, fmt), act))
    return QuantizedModel(layers, fmt)


def dequantize_model(q: QuantizedModel) -> FloatModel:
    dsp = [layer for layer in q.layers if layer.kind in (CONV, FC)]
    s = q.fmt.scale
    return FloatModel(
        conv1_w=dsp[0].weights * s,
        conv1_b=dsp[0].bias * s,
        conv2_w=dsp[1].weights * s,
        conv2_b=dsp[1].bias * s,
        fc1_w=dsp[2].weights * s,
        fc1_b=dsp[2].bias * s,
        fc2_w=dsp[3].weights * s,
        fc2_b=dsp[3].bias * s,
    )


def predict(m, images, batch: int = 500) -> np.ndarray:
    """Class predictions for a float or quantized model."""
    images = np.asarray(images)
    if isinstance(m, QuantizedModel):
        from .accel import infer_batch

        return infer_batch(m, images)
    x = prepare_images(images)
    out = [np.argmax(forward(m, x[i : i + batch]), axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(m, images, labels) -> float:
    """Fraction of argmax-correct predictions (ties to the lowest index)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(m, images) == labels))
