"""Central finite-difference checks for the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .model import Model, loss
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    kinks: int


def _objective(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Loss plus the activation pattern: ReLU signs and max-pool argmaxes."""
    h = Tensor(x)
    pattern = []
    for layer in model.layers:
        if layer.kind == "Linear":
            h = T.linear(h, Tensor(layer.params[0].data), Tensor(layer.params[1].data))
        elif layer.kind == "Conv2D":
            h = T.conv2d(h, Tensor(layer.params[0].data), Tensor(layer.params[1].data))
        elif layer.kind == "ReLU":
            pattern.append(h.data > 0)
            h = T.relu(h)
        elif layer.kind == "ELU":
            h = T.elu(h, layer.alpha)
        elif layer.kind == "MaxPool2D":
            pattern.append(_kernels.maxpool_forward(h.data, *layer.kernel)[1])
            h = T.maxpool2d(h, *layer.kernel)
        elif layer.kind == "Flatten":
            h = T.reshape(h, (h.shape[0], -1))
    return loss(h, y, model.loss_kind).item(), pattern


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_difference_report(model: Model, x, y, h: float = 1e-5, n_coords: int | None = 200, seed: int = 0,
                             include_input: bool = True) -> GradCheckReport:
    """Compare backprop against central differences on sampled coordinates.

    Samples up to ``n_coords`` coordinates per parameter tensor (all when
    ``None``) and, optionally, as many input coordinates. When the step
    flips a ReLU sign or a max-pool argmax anywhere in the network, the
    loss is not differentiable across ``[v - h, v + h]``; such coordinates
    are counted in ``kinks`` and not scored. Values are restored exactly.
    """
    x = np.array(x, dtype=np.float64)
    y = np.asarray(y)
    params = model.parameters()
    xt = Tensor(x.copy(), requires_grad=include_input)
    logits, _ = model.forward(xt, capture=None)
    backward(loss(logits, y, model.loss_kind), params)
    _, base = _objective(model, x, y)

    rng = np.random.default_rng(seed)
    worst, checked, kinks = 0.0, 0, 0
    targets = [(p.data, p.grad) for p in params]
    if include_input:
        targets.append((x, xt.grad))
    for arr, grad in targets:
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if n_coords is None or n_coords >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=n_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, pu = _objective(model, x, y)
            flat[i] = orig - h
            down, pd = _objective(model, x, y)
            flat[i] = orig
            if not (_same(pu, base) and _same(pd, base)):
                kinks += 1
                continue
            checked += 1
            worst = max(worst, relative_error(gflat[i], (up - down) / (2 * h)))
    return GradCheckReport(worst, checked, kinks)


def finite_difference_check(model: Model, x, y, h: float = 1e-5, n_coords: int | None = 200, seed: int = 0,
                            include_input: bool = True) -> float:
    """Max relative error |analytic - cd| / max(|analytic|, |cd|, 1e-8)."""
    return finite_difference_report(model, x, y, h, n_coords, seed, include_input).max_rel_error
