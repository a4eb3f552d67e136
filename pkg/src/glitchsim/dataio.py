"""File formats: MNIST IDX, the DSQW quantized-weight file, CSV/JSON results.

DSQW layout (little-endian)::

    b"DSQW"  u16 version=1  u16 n_layers
    per layer:
        u8 kind (0 conv, 1 pool, 2 fc)   4 x u32 dims
        u8 total_bits  u8 integer_bits  u8 signed
        weights, then biases: raw codes, ceil(total_bits / 8) bytes each,
        two's complement when signed
    u32 CRC32 of every preceding byte

Activations are not stored: every conv/fc layer applies tanh except the last
layer, which emits raw scores.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accel import CONV, FC, POOL, Layer, QuantizedModel
from .fxp import QFormat

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
WEIGHT_MAGIC = b"DSQW"
WEIGHT_VERSION = 1
KIND_TAG = {CONV: 0, POOL: 1, FC: 2}
TAG_KIND = {v: k for k, v in KIND_TAG.items()}


class FormatError(ValueError):
    """Base class for malformed input files."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


class ValueOutOfRange(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass(eq=False)
class ImageSet:
    pixels: np.ndarray  # (count, rows, cols) uint8

    @property
    def count(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def rows(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def cols(self) -> int:
        return int(self.pixels.shape[2])

    def __len__(self):
        return self.count


@dataclass(eq=False)
class LabelSet:
    labels: np.ndarray  # (count,) uint8

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])

    def __len__(self):
        return self.count


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetNotFound(str(path)) from exc


def parse_idx_images(data: bytes, require_mnist_dims: bool = True) -> ImageSet:
    if len(data) < 16:
        raise TruncatedFile(f"IDX image header needs 16 bytes, got {len(data)}")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagic(f"expected 0x{IMAGE_MAGIC:08x}, got 0x{magic:08x}")
    if require_mnist_dims and (rows, cols) != (28, 28):
        raise DimensionMismatch(f"expected 28x28 images, got {rows}x{cols}")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise TruncatedFile(f"declared {need} bytes, file has {len(data)}")
    if len(data) > need:
        raise DimensionMismatch(f"{len(data) - need} trailing bytes after payload")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)
    return ImageSet(pixels.copy())


def parse_idx_labels(data: bytes) -> LabelSet:
    if len(data) < 8:
        raise TruncatedFile(f"IDX label header needs 8 bytes, got {len(data)}")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise BadMagic(f"expected 0x{LABEL_MAGIC:08x}, got 0x{magic:08x}")
    if len(data) < 8 + count:
        raise TruncatedFile(f"declared {8 + count} bytes, file has {len(data)}")
    if len(data) > 8 + count:
        raise DimensionMismatch(f"{len(data) - 8 - count} trailing bytes after payload")
    labels = np.frombuffer(data, dtype=np.uint8, offset=8).copy()
    if labels.size and labels.max() > 9:
        raise ValueOutOfRange(f"label {int(labels.max())} outside [0, 9]")
    return LabelSet(labels)


def load_idx_images(path, require_mnist_dims: bool = True) -> ImageSet:
    return parse_idx_images(_read(path), require_mnist_dims)


def load_idx_labels(path) -> LabelSet:
    return parse_idx_labels(_read(path))


def serialize_idx_images(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    return struct.pack(">IIII", IMAGE_MAGIC, *pixels.shape) + pixels.tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes()


def load_mnist(root, split: str = "test") -> tuple:
    """``(ImageSet, LabelSet)`` for ``split`` in ``{"train", "test"}`` under ``root``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFound(str(root))
    images = load_idx_images(root / f"{prefix}-images-idx3-ubyte")
    labels = load_idx_labels(root / f"{prefix}-labels-idx1-ubyte")
    if images.count != labels.count:
        raise DimensionMismatch(f"{images.count} images vs {labels.count} labels")
    return images, labels


# ---------------------------------------------------------------------------
# DSQW weights


def _code_bytes(fmt: QFormat) -> int:
    return (fmt.total_bits + 7) // 8


def _pack_codes(raw: np.ndarray, fmt: QFormat) -> bytes:
    nb = _code_bytes(fmt)
    dtype = np.dtype(f"<{'i' if fmt.signed else 'u'}{nb if nb != 3 else 4}")
    arr = np.asarray(raw, dtype=np.int64).astype(dtype)
    if nb == 3:
        return b"".join(int(v).to_bytes(3, "little", signed=fmt.signed) for v in arr.ravel())
    return arr.tobytes()


def _unpack_codes(buf: bytes, n: int, fmt: QFormat) -> np.ndarray:
    nb = _code_bytes(fmt)
    if nb == 3:
        return np.array(
            [int.from_bytes(buf[i * 3 : i * 3 + 3], "little", signed=fmt.signed) for i in range(n)],
            dtype=np.int64,
        )
    dtype = np.dtype(f"<{'i' if fmt.signed else 'u'}{nb}")
    return np.frombuffer(buf, dtype=dtype, count=n).astype(np.int64)


def serialize_weights(model: QuantizedModel) -> bytes:
    out = io.BytesIO()
    out.write(WEIGHT_MAGIC)
    out.write(struct.pack("<HH", WEIGHT_VERSION, len(model.layers)))
    fmt = model.fmt
    for layer in model.layers:
        out.write(struct.pack("<B4I", KIND_TAG[layer.kind], *layer.dims))
        out.write(struct.pack("<BBB", fmt.total_bits, fmt.integer_bits, int(fmt.signed)))
        out.write(_pack_codes(layer.weights.ravel(), fmt))
        out.write(_pack_codes(layer.bias.ravel(), fmt))
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_weights(data: bytes, input_shape=(1, 28, 28)) -> QuantizedModel:
    if len(data) < 12:
        raise TruncatedFile("weight file shorter than header + checksum")
    if data[:4] != WEIGHT_MAGIC:
        raise BadMagic(f"expected {WEIGHT_MAGIC!r}, got {data[:4]!r}")
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != WEIGHT_VERSION:
        raise VersionMismatch(f"unsupported weight file version {version}")
    pos = 8
    specs = []
    fmt = None
    for _ in range(n_layers):
        if pos + 20 > len(data) - 4:
            raise TruncatedFile("layer header past end of file")
        tag, *dims = struct.unpack_from("<B4I", data, pos)
        total, integer, signed = struct.unpack_from("<BBB", data, pos + 17)
        pos += 20
        if tag not in TAG_KIND:
            raise DimensionMismatch(f"unknown layer tag {tag}")
        if signed > 1:
            raise ValueOutOfRange(f"bad signed flag {signed}")
        try:
            layer_fmt = QFormat(total, integer, bool(signed))
        except ValueError as exc:
            raise ValueOutOfRange(str(exc)) from exc
        if fmt is None:
            fmt = layer_fmt
        elif layer_fmt != fmt:
            raise DimensionMismatch("mixed formats within one model are not supported")
        kind = TAG_KIND[tag]
        n_w = math.prod(dims) if kind == CONV else (dims[0] * dims[1] if kind == FC else 0)
        n_b = 0 if kind == POOL else dims[0]
        nb = _code_bytes(layer_fmt)
        end = pos + (n_w + n_b) * nb
        if end > len(data) - 4:
            raise TruncatedFile("weight payload past end of file")
        w = _unpack_codes(data[pos : pos + n_w * nb], n_w, layer_fmt)
        b = _unpack_codes(data[pos + n_w * nb : end], n_b, layer_fmt)
        pos = end
        specs.append((kind, dims, w, b))
    if pos + 4 != len(data):
        if pos + 4 > len(data):
            raise TruncatedFile("missing checksum")
        raise DimensionMismatch(f"{len(data) - pos - 4} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[:pos]) & 0xFFFFFFFF:
        raise ChecksumMismatch("CRC32 does not match contents")
    n_dsp = sum(kind != POOL for kind, *_ in specs)
    layers = []
    seen = 0
    for kind, dims, w, b in specs:
        if kind == POOL:
            act = "none"
        else:
            seen += 1
            act = "none" if seen == n_dsp else "tanh"
        try:
            layers.append(Layer(kind, dims, w, b, act))
        except ValueError as exc:
            raise DimensionMismatch(str(exc)) from exc
    try:
        return QuantizedModel(layers, fmt or QFormat(), input_shape)
    except ValueError as exc:
        raise DimensionMismatch(str(exc)) from exc


def save_weights(model: QuantizedModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_weights(model))


def load_weights(path, input_shape=(1, 28, 28)) -> QuantizedModel:
    return parse_weights(_read(path), input_shape)


# ---------------------------------------------------------------------------
# result tables


def rows_to_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt_cell(row[c]) for c in columns})
    return buf.getvalue()


def _fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_table(rows: list, columns: list, csv_path=None, json_path=None) -> None:
    """Emit ``rows`` as CSV and/or an equivalent JSON array of objects."""
    if csv_path is not None:
        _atomic_write(csv_path, rows_to_csv(rows, columns))
    if json_path is not None:
        payload = [{c: _json_cell(row[c]) for c in columns} for row in rows]
        _atomic_write(json_path, json.dumps(payload, indent=1) + "\n")


def _json_cell(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
