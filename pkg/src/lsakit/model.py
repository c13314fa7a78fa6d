"""Layer specs, the sequential :class:`Model`, and architectures A and B."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShapeError(ValueError):
    pass


@dataclass
class LayerSpec:
    """One layer. ``kind`` is Linear, Conv2D, ReLU, ELU, MaxPool2D or Flatten.

    ``params`` holds ``[weight, bias]`` for the learnable kinds and is empty
    otherwise.
    """

    kind: str
    out_features: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    alpha: float = 1.0
    params: list[Tensor] = field(default_factory=list)

    @property
    def learnable(self) -> bool:
        return self.kind in ("Linear", "Conv2D")

    def describe(self) -> str:
        if self.kind == "Linear":
            return f"Linear({self.out_features})"
        if self.kind == "Conv2D":
            return f"Conv2D({self.out_channels}, {self.kernel[0]}x{self.kernel[1]})"
        if self.kind == "MaxPool2D":
            return f"MaxPool2D({self.kernel[0]}, {self.kernel[1]})"
        if self.kind == "ELU":
            return f"ELU({self.alpha:g})"
        return self.kind


def Linear(out_features: int) -> LayerSpec:
    return LayerSpec("Linear", out_features=out_features)


def Conv2D(out_channels: int, kh: int, kw: int | None = None) -> LayerSpec:
    return LayerSpec("Conv2D", out_channels=out_channels, kernel=(kh, kw if kw is not None else kh))


def ReLU() -> LayerSpec:
    return LayerSpec("ReLU")


def ELU(alpha: float = 1.0) -> LayerSpec:
    return LayerSpec("ELU", alpha=alpha)


def MaxPool2D(kh: int, kw: int | None = None) -> LayerSpec:
    return LayerSpec("MaxPool2D", kernel=(kh, kw if kw is not None else kh))


def Flatten() -> LayerSpec:
    return LayerSpec("Flatten")


def _out_shape(layer: LayerSpec, in_shape: tuple[int, ...], pos: int) -> tuple[int, ...]:
    k = layer.kind
    if k == "Linear":
        if len(in_shape) != 1:
            raise ShapeError(f"layer {pos} ({layer.describe()}) expects flat input, got per-sample shape {in_shape}")
        return (layer.out_features,)
    if k == "Conv2D":
        if len(in_shape) != 3:
            raise ShapeError(f"layer {pos} ({layer.describe()}) expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = layer.kernel
        if h < kh or w < kw:
            raise ShapeError(f"layer {pos} ({layer.describe()}) kernel larger than input {in_shape}")
        return (layer.out_channels, h - kh + 1, w - kw + 1)
    if k == "MaxPool2D":
        if len(in_shape) != 3:
            raise ShapeError(f"layer {pos} ({layer.describe()}) expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = layer.kernel
        return (c, h // kh, w // kw)
    if k == "Flatten":
        return (int(np.prod(in_shape)),)
    if k in ("ReLU", "ELU"):
        return in_shape
    raise ValueError(f"unknown layer kind {k!r}")


class Model:
    """Ordered layer stack with a learnable-layer index map.

    ``learnable_index[l]`` is the position in ``layers`` of learnable layer
    ``l``. ``loss_kind`` is ``binary_ce`` for a single output unit and
    ``softmax_ce`` otherwise.
    """

    def __init__(self, layers: list[LayerSpec], input_shape: tuple[int, ...], seed: int | None = 0,
                 init: bool = True):
        self.layers = layers
        self.input_shape = tuple(int(d) for d in input_shape)
        self.learnable_index = [i for i, layer in enumerate(layers) if layer.learnable]
        self.layer_shapes = self._infer_shapes()
        if init:
            self.init_parameters(seed)

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        cur = self.input_shape
        for pos, layer in enumerate(self.layers):
            cur = _out_shape(layer, cur, pos)
            shapes.append(cur)
        return shapes

    @property
    def num_learnable(self) -> int:
        return len(self.learnable_index)

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.layer_shapes[-1]))

    @property
    def loss_kind(self) -> str:
        return "binary_ce" if self.output_dim == 1 else "softmax_ce"

    def input_shape_of(self, pos: int) -> tuple[int, ...]:
        return self.input_shape if pos == 0 else self.layer_shapes[pos - 1]

    def init_parameters(self, seed: int | None) -> None:
        """Fan-in scaled uniform init: weights in +-sqrt(6 / fan_in), biases in
        +-1 / sqrt(fan_in).

        Biases are not zero: with zero biases, exactly-zero MNIST background
        patches put every first-layer ReLU on its kink.
        """
        rng = np.random.default_rng(seed)
        for pos, layer in enumerate(self.layers):
            if not layer.learnable:
                continue
            in_shape = self.input_shape_of(pos)
            if layer.kind == "Linear":
                wshape = (layer.out_features, in_shape[0])
                fan_in = in_shape[0]
                nout = layer.out_features
            else:
                kh, kw = layer.kernel
                wshape = (layer.out_channels, in_shape[0], kh, kw)
                fan_in = in_shape[0] * kh * kw
                nout = layer.out_channels
            bound = np.sqrt(6.0 / fan_in)
            layer.params = [
                Tensor(rng.uniform(-bound, bound, size=wshape), requires_grad=True),
                Tensor(rng.uniform(-1.0, 1.0, size=nout) / np.sqrt(fan_in), requires_grad=True),
            ]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.data.shape != np.shape(a):
                raise ValueError(f"parameter shape mismatch {p.data.shape} vs {np.shape(a)}")
            p.data = np.array(a, dtype=np.float64)

    def clone(self) -> "Model":
        twin = Model([LayerSpec(l.kind, l.out_features, l.out_channels, l.kernel, l.alpha) for l in self.layers],
                     self.input_shape, init=False)
        for src, dst in zip(self.layers, twin.layers):
            dst.params = [Tensor(p.data.copy(), requires_grad=True) for p in src.params]
        return twin

    def describe(self) -> str:
        return " => ".join(layer.describe() for layer in self.layers)

    def forward(self, x, capture: str | None = "pre", track_params: bool = True):
        """Run the network on a batch.

        Returns ``(logits, trace)`` where ``trace[l]`` is learnable layer
        ``l``'s output: the raw Linear/Conv2D output when ``capture="pre"``,
        or the output of the activation that follows it when ``"post"``.
        ``capture=None`` skips the trace (returns an empty list).
        ``track_params=False`` treats the weights as constants, which is
        what attacks use.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.input_shape
        if h.shape[1:] != expected:
            raise ShapeError(f"layer 0 ({self.layers[0].describe()}) expects per-sample shape "
                             f"{expected}, got {h.shape[1:]}")
        trace: list[Tensor] = []
        pending = False
        for pos, layer in enumerate(self.layers):
            if layer.learnable:
                w, b = layer.params
                if not track_params:
                    w, b = Tensor(w.data), Tensor(b.data)
                h = T.linear(h, w, b) if layer.kind == "Linear" else T.conv2d(h, w, b)
                if capture == "pre":
                    trace.append(h)
                elif capture == "post":
                    pending = True
                    nxt = self.layers[pos + 1] if pos + 1 < len(self.layers) else None
                    if nxt is None or nxt.kind not in ("ReLU", "ELU"):
                        trace.append(h)
                        pending = False
                continue
            if layer.kind == "ReLU":
                h = T.relu(h)
            elif layer.kind == "ELU":
                h = T.elu(h, layer.alpha)
            elif layer.kind == "MaxPool2D":
                h = T.maxpool2d(h, *layer.kernel)
            elif layer.kind == "Flatten":
                h = T.reshape(h, (h.shape[0], -1))
            if pending:
                trace.append(h)
                pending = False
        return h, trace

    def __call__(self, x, track_params: bool = True) -> Tensor:
        return self.forward(x, capture=None, track_params=track_params)[0]

    def logits(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Inference-only logits, batched."""
        out = [self.forward(x[i:i + batch_size], capture=None, track_params=False)[0].data
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return predict_from_logits(self.logits(x, batch_size))


def predict_from_logits(z: np.ndarray) -> np.ndarray:
    # single unit: logit >= 0 means class 1
    if z.shape[1] == 1:
        return (z[:, 0] >= 0).astype(np.int64)
    return z.argmax(axis=1)


def loss(logits: Tensor, targets, kind: str) -> Tensor:
    targets = np.asarray(targets)
    if kind == "binary_ce":
        if logits.ndim != 2 or logits.shape[1] != 1:
            raise ShapeError(f"binary_ce needs (N, 1) logits, got {logits.shape}")
        if not np.all((targets == 0) | (targets == 1)):
            raise ValueError("binary_ce targets must be 0 or 1")
        return T.binary_cross_entropy_with_logits(logits, targets)
    if kind == "softmax_ce":
        c = logits.shape[1]
        if np.any(targets < 0) or np.any(targets >= c) or np.any(targets != np.round(targets)):
            raise ValueError(f"softmax_ce targets must be integers in [0, {c})")
        return T.softmax_cross_entropy(logits, targets)
    raise ValueError(f"unknown loss kind {kind!r}")


def model_a(seed: int | None = 0, hidden: int = 100) -> Model:
    """MLP for the 2-D Moon data: three ELU hidden layers and one logit."""
    layers = [Linear(hidden), ELU(), Linear(hidden), ELU(), Linear(hidden), ELU(), Linear(1)]
    return Model(layers, (2,), seed)


def model_b(seed: int | None = 0) -> Model:
    """Small CNN for 1x28x28 MNIST digits."""
    layers = [
        Conv2D(16, 5), ReLU(),
        Conv2D(32, 5), ReLU(), MaxPool2D(2),
        Conv2D(64, 5), ReLU(), MaxPool2D(2),
        Flatten(),
        Linear(100), ReLU(),
        Linear(10),
    ]
    return Model(layers, (1, 28, 28), seed)


ARCHITECTURES = {"A": model_a, "B": model_b}


def build(arch: str, seed: int | None = 0) -> Model:
    try:
        return ARCHITECTURES[arch.upper()](seed)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None
