"""Binary model checkpoints.

Layout (little-endian)::

    b"LSAC"  u16 version  u16 layer_count
    per layer:
        u8 kind tag
        u8 n_hyper, then n_hyper x u32 hyperparameters
        u8 n_params, then per parameter:
            u8 rank, rank x u32 dims, prod(dims) x f64 values

The per-sample input shape is stored as a pseudo-layer header right after
the layer count: u8 rank, rank x u32 dims. ELU's alpha is stored as an
integer number of millionths.

A plain-text sidecar ``<checkpoint>.meta`` carries ``key=value`` lines
(seed, epoch, config hash).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import LayerSpec, Model
from .tensor import Tensor

MAGIC = b"LSAC"
VERSION = 1
TAGS = {"Linear": 1, "Conv2D": 2, "ReLU": 3, "ELU": 4, "MaxPool2D": 5, "Flatten": 6}
KINDS = {v: k for k, v in TAGS.items()}


class CheckpointError(ValueError):
    pass


def _hyper(layer: LayerSpec, in_shape) -> list[int]:
    if layer.kind == "Linear":
        return [in_shape[0], layer.out_features]
    if layer.kind == "Conv2D":
        return [in_shape[0], layer.out_channels, *layer.kernel]
    if layer.kind == "MaxPool2D":
        return list(layer.kernel)
    if layer.kind == "ELU":
        return [int(round(layer.alpha * 1_000_000))]
    return []


def _param_shapes(layer: LayerSpec, in_shape) -> list[tuple[int, ...]]:
    if layer.kind == "Linear":
        return [(layer.out_features, in_shape[0]), (layer.out_features,)]
    if layer.kind == "Conv2D":
        return [(layer.out_channels, in_shape[0], *layer.kernel), (layer.out_channels,)]
    return []


def to_bytes(model: Model) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(model.layers))
    out += struct.pack("<B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    for pos, layer in enumerate(model.layers):
        hyper = _hyper(layer, model.input_shape_of(pos))
        out += struct.pack("<BB", TAGS[layer.kind], len(hyper))
        out += struct.pack(f"<{len(hyper)}I", *hyper)
        out += struct.pack("<B", len(layer.params))
        for p in layer.params:
            out += struct.pack("<B", p.data.ndim)
            out += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
            out += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        if self.pos + 8 * n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated parameter blob at byte {self.pos}")
        a = np.frombuffer(self.raw, dtype="<f8", count=n, offset=self.pos).reshape(shape)
        self.pos += 8 * n
        return a.astype(np.float64)


def from_bytes(raw: bytes, source="<bytes>") -> Model:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:4]!r}")
    r = _Reader(raw, source)
    r.pos = 4
    version, count = r.take("<HH")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    (rank,) = r.take("<B")
    input_shape = r.take(f"<{rank}I")
    layers, params = [], []
    for _ in range(count):
        tag, nh = r.take("<BB")
        if tag not in KINDS:
            raise CheckpointError(f"{source}: unknown layer tag {tag}")
        hyper = r.take(f"<{nh}I")
        kind = KINDS[tag]
        if kind == "Linear":
            layer = LayerSpec(kind, out_features=hyper[1])
        elif kind == "Conv2D":
            layer = LayerSpec(kind, out_channels=hyper[1], kernel=(hyper[2], hyper[3]))
        elif kind == "MaxPool2D":
            layer = LayerSpec(kind, kernel=(hyper[0], hyper[1]))
        elif kind == "ELU":
            layer = LayerSpec(kind, alpha=hyper[0] / 1_000_000)
        else:
            layer = LayerSpec(kind)
        (np_,) = r.take("<B")
        blobs = []
        for _ in range(np_):
            (prank,) = r.take("<B")
            dims = r.take(f"<{prank}I")
            blobs.append(r.array(dims))
        layers.append(layer)
        params.append(blobs)
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes")
    try:
        model = Model(layers, input_shape, init=False)
    except ValueError as e:
        raise CheckpointError(f"{source}: inconsistent architecture: {e}") from None
    for pos, (layer, blobs) in enumerate(zip(model.layers, params)):
        want = _param_shapes(layer, model.input_shape_of(pos))
        got = [b.shape for b in blobs]
        if got != want:
            raise CheckpointError(f"{source}: layer {pos} ({layer.describe()}) has parameter shapes {got}, "
                                  f"architecture needs {want}")
        layer.params = [Tensor(b, requires_grad=True) for b in blobs]
    model.layer_shapes = model._infer_shapes()
    return model


def save(model: Model, path, meta: dict | None = None) -> str:
    """Write the checkpoint (and sidecar when ``meta`` is given); return its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = to_bytes(model)
    path.write_bytes(raw)
    if meta is not None:
        Path(f"{path}.meta").write_text("".join(f"{k}={meta[k]}\n" for k in sorted(meta)))
    return hashlib.sha256(raw).hexdigest()


def load(path) -> Model:
    path = Path(path)
    return from_bytes(path.read_bytes(), path)


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(f"{path}.meta").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta
