"""L-infinity attacks (FGSM, PGD, FAST) and statistical noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, loss
from .tensor import Tensor

ATTACK_KINDS = ("FGSM", "PGD", "FAST")
NOISE_KINDS = ("Gaussian", "Salt", "Pepper", "Speckle")


@dataclass(frozen=True)
class AttackSpec:
    """L-infinity attack configuration.

    ``steps``/``step_size`` apply to PGD (and ``step_size`` to FAST, where
    it defaults to 1.25 * epsilon). ``step_size=None`` for PGD means
    epsilon / 4. ``clamp`` bounds the input domain.
    """

    kind: str = "FGSM"
    epsilon: float = 0.3
    steps: int = 10
    step_size: float | None = None
    random_init: bool = False
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        kind = _canon(self.kind, ATTACK_KINDS)
        object.__setattr__(self, "kind", kind)
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if kind == "PGD" and self.steps < 1:
            raise ValueError("PGD needs steps >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if kind == "FAST" and not self.random_init:
            object.__setattr__(self, "random_init", True)
        if self.clamp is not None:
            object.__setattr__(self, "clamp", (float(self.clamp[0]), float(self.clamp[1])))

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.kind == "FAST":
            return 1.25 * self.epsilon
        if self.kind == "PGD":
            return self.epsilon / 4
        return self.epsilon

    @classmethod
    def pgd(cls, epsilon: float, steps: int = 10, step_size: float | None = None, random_init: bool = True,
            clamp=None) -> "AttackSpec":
        return cls("PGD", epsilon, steps, step_size, random_init, clamp)

    @property
    def label(self) -> str:
        return f"{self.kind}(eps={self.epsilon:g})"


@dataclass(frozen=True)
class NoiseSpec:
    """Statistical noise. ``magnitude`` is a std for Gaussian/Speckle and a
    per-coordinate corruption probability for Salt/Pepper."""

    kind: str = "Gaussian"
    magnitude: float = 0.1
    seed: int = 0
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        kind = _canon(self.kind, NOISE_KINDS)
        object.__setattr__(self, "kind", kind)
        if self.magnitude < 0:
            raise ValueError("noise magnitude must be >= 0")
        if kind in ("Salt", "Pepper") and self.magnitude > 1:
            raise ValueError("corruption probability must be in [0, 1]")

    @property
    def label(self) -> str:
        return f"{self.kind}({self.magnitude:g})"


def _canon(kind: str, allowed) -> str:
    for a in allowed:
        if kind.lower() == a.lower():
            return a
    raise ValueError(f"unknown kind {kind!r}; expected one of {allowed}")


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def input_gradient(model: Model, x: np.ndarray, loss_fn) -> np.ndarray:
    """Gradient of ``loss_fn(logits)`` w.r.t. the input, weights held fixed."""
    xt = Tensor(x, requires_grad=True)
    logits, _ = model.forward(xt, capture=None, track_params=False)
    loss_fn(logits).backward()
    return xt.grad


def grad_wrt_input(model: Model, x, y, kind: str | None = None) -> np.ndarray:
    """Input gradient of the classification loss J(theta, x, y)."""
    kind = kind or model.loss_kind
    return input_gradient(model, np.asarray(x, dtype=np.float64), lambda z: loss(z, y, kind))


def _project(x_adv, x, eps, clamp):
    out = np.clip(x_adv, x - eps, x + eps)
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def _clamped(x, clamp):
    return x if clamp is None else np.clip(x, clamp[0], clamp[1])


def fgsm(model: Model, x, y, spec: AttackSpec, loss_fn=None) -> np.ndarray:
    """One signed-gradient step of size epsilon."""
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0:
        return x.copy()
    g = input_gradient(model, x, loss_fn or (lambda z: loss(z, y, model.loss_kind)))
    return _clamped(x + spec.epsilon * np.sign(g), spec.clamp)


def pgd(model: Model, x, y, spec: AttackSpec, rng=None, loss_fn=None, init=None) -> np.ndarray:
    """Signed-gradient ascent projected onto the epsilon ball after every step.

    ``init`` overrides the starting point (projected first); otherwise a
    uniform start inside the ball is used when ``spec.random_init``.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = spec.epsilon
    if eps == 0:
        return x.copy()
    loss_fn = loss_fn or (lambda z: loss(z, y, model.loss_kind))
    if init is not None:
        x_adv = _project(np.asarray(init, dtype=np.float64), x, eps, spec.clamp)
    elif spec.random_init:
        x_adv = _project(x + _as_rng(rng).uniform(-eps, eps, size=x.shape), x, eps, spec.clamp)
    else:
        x_adv = x.copy()
    alpha = spec.alpha
    for _ in range(spec.steps):
        g = input_gradient(model, x_adv, loss_fn)
        x_adv = _project(x_adv + alpha * np.sign(g), x, eps, spec.clamp)
    return x_adv


def fast(model: Model, x, y, spec: AttackSpec, rng=None, loss_fn=None) -> np.ndarray:
    """FGSM from a uniform random start (default step 1.25 * epsilon)."""
    x = np.asarray(x, dtype=np.float64)
    eps = spec.epsilon
    if eps == 0:
        return x.copy()
    x0 = _project(x + _as_rng(rng).uniform(-eps, eps, size=x.shape), x, eps, spec.clamp)
    g = input_gradient(model, x0, loss_fn or (lambda z: loss(z, y, model.loss_kind)))
    return _project(x0 + spec.alpha * np.sign(g), x, eps, spec.clamp)


def attack(model: Model, x, y, spec: AttackSpec, rng=None, loss_fn=None) -> np.ndarray:
    if spec.kind == "FGSM":
        return fgsm(model, x, y, spec, loss_fn)
    if spec.kind == "PGD":
        return pgd(model, x, y, spec, rng, loss_fn)
    return fast(model, x, y, spec, rng, loss_fn)


def apply_noise(x, spec: NoiseSpec) -> np.ndarray:
    """Add seeded statistical noise. Salt/Pepper use the clamp bounds as the
    domain max/min when set, else the data range."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    if spec.clamp is not None:
        lo, hi = spec.clamp
    else:
        lo, hi = float(x.min()), float(x.max())
    if spec.kind == "Gaussian":
        out = x + spec.magnitude * rng.standard_normal(x.shape)
    elif spec.kind == "Speckle":
        out = x + x * (spec.magnitude * rng.standard_normal(x.shape))
    else:
        hit = rng.random(x.shape) < spec.magnitude
        out = np.where(hit, hi if spec.kind == "Salt" else lo, x)
    return _clamped(out, spec.clamp)
