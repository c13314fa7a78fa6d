"""Standard, adversarial, TRADE and layer-wise regularized (AT-LR) training.

All trainers share one minibatch loop. Per batch the objective is assembled
from up to three pieces:

* the classification loss on clean and/or adversarial inputs,
* the TRADE divergence between clean and adversarial predictions,
* the layer-wise regularizer: sum over regularized layers l of
  gamma_l * mean_i ||phi_l(x_i) - phi_l(x_adv_i)|| / ||phi_l(x_i)||.

Randomness is split into two independent streams derived from the seed:
one for minibatch order and one for attack initialization. That keeps the
degenerate settings (epsilon = 0, gamma = 0, no regularized layers,
lambda = 0, delta = 1) bit-identical to the simpler trainers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .lsa import ZeroReferenceError
from .model import Model, loss
from .optim import Adam
from .perturb import AttackSpec, attack, fgsm, pgd
from .tensor import Tensor


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    attack: AttackSpec | None = None
    mix: bool = False
    delta: float = 0.5
    lam: float = 1.0
    gamma: dict[int, float] = field(default_factory=dict)
    detach_denominator: bool = False
    seed: int = 0
    loss_kind: str | None = None
    eval_epsilon: float = 0.3
    eval_clamp: tuple[float, float] | None = None
    log_eval_size: int = 1000
    eps_warmup: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        for l, g in self.gamma.items():
            if g < 0:
                raise ValueError(f"gamma[{l}] must be >= 0, got {g}")
        if self.eps_warmup < 0:
            raise ValueError(f"eps_warmup must be >= 0, got {self.eps_warmup}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def mvl(self) -> list[int]:
        return sorted(self.gamma)

    def with_mvl(self, layers, gamma: float = 0.1) -> "TrainConfig":
        return replace(self, gamma={int(l): float(gamma) for l in layers})

    def digest(self) -> str:
        d = asdict(self)
        return hashlib.sha256(repr(sorted(d.items())).encode()).hexdigest()[:16]


@dataclass
class EpochLog:
    epoch: int
    clean_loss: float
    adv_loss: float
    lr_term: float
    clean_acc: float
    robust_acc: float


@dataclass
class TrainLog:
    entries: list[EpochLog] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "clean_loss", "adv_loss", "lr_term", "clean_acc", "robust_acc"])
        for e in self.entries:
            w.writerow([e.epoch] + [format(v, ".10g") for v in
                                    (e.clean_loss, e.adv_loss, e.lr_term, e.clean_acc, e.robust_acc)])
        return buf.getvalue()


def lr_term(trace_clean, trace_pert, gamma: dict[int, float], mvl=None, detach_denominator: bool = False) -> Tensor:
    """Differentiable layer-wise regularizer over the layers in ``mvl``
    (default: the keys of ``gamma``)."""
    layers = sorted(gamma) if mvl is None else list(mvl)
    total = Tensor(0.0)
    for l in layers:
        if not 0 <= l < len(trace_clean) or l >= len(trace_pert):
            raise IndexError(f"regularized layer {l} out of range for {len(trace_clean)} learnable layers")
        a, b = trace_clean[l], trace_pert[l]
        if a.shape != b.shape:
            raise ValueError(f"trace shape mismatch at layer {l}: {a.shape} vs {b.shape}")
        num = T.row_norm(a - b)
        den = T.row_norm(a.detach() if detach_denominator else a)
        zero = den.data == 0
        if zero.any():
            if np.any(num.data[zero] > 0):
                raise ZeroReferenceError(f"zero-reference representation at layer {l}")
            den = den + zero.astype(np.float64)
        total = total + gamma.get(l, 0.0) * T.mean(num / den)
    return total


def _kl(kind: str):
    return T.bernoulli_kl if kind == "binary_ce" else T.softmax_kl


def trade_adversary(model: Model, x, spec: AttackSpec, kind: str, rng) -> np.ndarray:
    """Maximize the clean-vs-perturbed prediction divergence with PGD,
    starting from a small Gaussian offset (the divergence has zero gradient at x)."""
    if spec.epsilon == 0:
        return np.array(x, dtype=np.float64)
    clean = Tensor(model.forward(x, capture=None, track_params=False)[0].data)
    kl = _kl(kind)
    start = x + 0.001 * rng.standard_normal(x.shape)
    steps = spec.steps if spec.kind == "PGD" else 1
    inner = AttackSpec("PGD", spec.epsilon, steps, spec.alpha if spec.kind == "PGD" else spec.epsilon,
                       False, spec.clamp)
    return pgd(model, x, None, inner, loss_fn=lambda z: kl(clean, z), init=start)


class Trainer:
    """Shared minibatch loop. ``mode`` is standard, at, or trade; any
    non-empty ``cfg.gamma`` adds the layer-wise regularizer."""

    def __init__(self, model: Model, cfg: TrainConfig, mode: str, regularize: bool = False,
                 eval_data: Dataset | None = None):
        self.model = model
        self.cfg = cfg
        self.mode = mode
        self.regularize = regularize
        self.kind = cfg.loss_kind or model.loss_kind
        self.eval_data = eval_data
        self.opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        ss = np.random.SeedSequence(cfg.seed)
        shuffle_seq, attack_seq = ss.spawn(2)
        self.shuffle_seed = int(shuffle_seq.generate_state(1)[0])
        self.attack_rng = np.random.default_rng(attack_seq)
        self.spec = cfg.attack
        if regularize:
            for l in cfg.gamma:
                if not 0 <= l < model.num_learnable:
                    raise ValueError(f"gamma key {l} is not a learnable layer (L_y={model.num_learnable})")

    def _ramp(self, step: int, per_epoch: int) -> None:
        """Scale the attack budget (and step) linearly over the warm-up batches."""
        spec, w = self.cfg.attack, self.cfg.eps_warmup
        if spec is None or w <= 0:
            return
        frac = min(1.0, (step + 1) / (w * per_epoch))
        self.spec = spec if frac >= 1.0 else replace(spec, epsilon=spec.epsilon * frac,
                                                     step_size=spec.alpha * frac)

    def _adversarial(self, x, y) -> np.ndarray:
        spec = self.spec
        if self.mode == "trade":
            return trade_adversary(self.model, x, spec, self.kind, self.attack_rng)
        return attack(self.model, x, y, spec, self.attack_rng)

    def objective(self, x, y):
        cfg, model = self.cfg, self.model
        reg = self.regularize and bool(cfg.gamma)
        parts = {"clean_loss": math.nan, "adv_loss": 0.0, "lr_term": 0.0}
        if self.mode == "standard":
            logits, _ = model.forward(x, capture=None)
            total = loss(logits, y, self.kind)
            parts["clean_loss"] = total.item()
            return total, parts

        x_adv = self._adversarial(x, y)
        need_clean_graph = reg or self.mode == "trade" or cfg.mix
        capture = "pre" if reg else None
        if need_clean_graph:
            logits_c, trace_c = model.forward(x, capture=capture)
            clean = loss(logits_c, y, self.kind)
        else:
            logits_c = Tensor(model.forward(x, capture=None, track_params=False)[0].data)
            clean = loss(logits_c, y, self.kind)
            trace_c = []
        logits_a, trace_a = model.forward(x_adv, capture=capture)
        parts["clean_loss"] = clean.item()

        if self.mode == "trade":
            div = _kl(self.kind)(logits_c, logits_a)
            parts["adv_loss"] = div.item()
            total = clean + cfg.lam * div
        else:
            adv = loss(logits_a, y, self.kind)
            parts["adv_loss"] = adv.item()
            total = cfg.delta * clean + (1.0 - cfg.delta) * adv if cfg.mix else adv
        if reg:
            term = lr_term(trace_c, trace_a, cfg.gamma, detach_denominator=cfg.detach_denominator)
            parts["lr_term"] = term.item()
            total = total + term
        return total, parts

    def _log_eval(self, epoch: int, sums: dict, nb: int, data: Dataset) -> EpochLog:
        cfg = self.cfg
        n = min(cfg.log_eval_size, len(data))
        idx = np.random.default_rng([cfg.seed, 7919]).choice(len(data), size=n, replace=False) \
            if n < len(data) else np.arange(n)
        x, y = data.inputs[idx], data.targets[idx]
        clean_acc = 100.0 * np.mean(self.model.predict(x) == y)
        spec = AttackSpec("FGSM", cfg.eval_epsilon, clamp=cfg.eval_clamp)
        x_adv = np.concatenate([fgsm(self.model, x[i:i + 500], y[i:i + 500], spec) for i in range(0, n, 500)])
        robust_acc = 100.0 * np.mean(self.model.predict(x_adv) == y)
        return EpochLog(epoch, sums["clean_loss"] / nb, sums["adv_loss"] / nb, sums["lr_term"] / nb,
                        float(clean_acc), float(robust_acc))

    def fit(self, dataset: Dataset) -> TrainLog:
        log = TrainLog()
        params = self.model.parameters()
        eval_data = self.eval_data if self.eval_data is not None else dataset
        per_epoch = -(-len(dataset) // self.cfg.batch_size)
        for epoch in range(self.cfg.epochs):
            sums = {"clean_loss": 0.0, "adv_loss": 0.0, "lr_term": 0.0}
            nb = 0
            for b, (x, y) in enumerate(batches(dataset, self.cfg.batch_size, True, self.shuffle_seed, epoch)):
                self._ramp(epoch * per_epoch + b, per_epoch)
                total, parts = self.objective(x, y)
                if not np.isfinite(total.data):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
                T.backward(total, params)
                self.opt.step()
                for k in sums:
                    sums[k] += parts[k]
                nb += 1
            log.entries.append(self._log_eval(epoch, sums, nb, eval_data))
        return log


def train_standard(model: Model, dataset: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None):
    """Plain minibatch Adam on the classification loss (``cfg.attack`` ignored)."""
    return model, Trainer(model, cfg, "standard", eval_data=eval_data).fit(dataset)


def train_at(model: Model, dataset: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None):
    """Adversarial training: loss on ``cfg.attack`` examples, or the
    delta-weighted clean/adversarial mix when ``cfg.mix``."""
    if cfg.attack is None:
        raise ValueError("train_at needs cfg.attack")
    return model, Trainer(model, cfg, "at", eval_data=eval_data).fit(dataset)


def train_trade(model: Model, dataset: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None):
    """Clean loss plus lambda times the worst-case prediction divergence."""
    if cfg.attack is None:
        raise ValueError("train_trade needs cfg.attack for the inner maximization budget")
    return model, Trainer(model, cfg, "trade", eval_data=eval_data).fit(dataset)


def train_at_lr(model: Model, dataset: Dataset, cfg: TrainConfig, base: str = "at",
                eval_data: Dataset | None = None):
    """AT or TRADE (``base``) plus the layer-wise regularizer on ``cfg.gamma``'s layers.

    The adversarial example of each minibatch feeds both the base loss and
    the regularizer.
    """
    if cfg.attack is None:
        raise ValueError("train_at_lr needs cfg.attack")
    if base not in ("at", "trade"):
        raise ValueError(f"base must be 'at' or 'trade', got {base!r}")
    return model, Trainer(model, cfg, base, regularize=True, eval_data=eval_data).fit(dataset)


TRAINERS = {"standard": train_standard, "at": train_at, "trade": train_trade}


def train(model: Model, dataset: Dataset, cfg: TrainConfig, kind: str, eval_data: Dataset | None = None):
    """Dispatch on trainer kind: standard, at, trade, at_lr, trade_lr."""
    if kind == "at_lr":
        return train_at_lr(model, dataset, cfg, "at", eval_data)
    if kind == "trade_lr":
        return train_at_lr(model, dataset, cfg, "trade", eval_data)
    try:
        fn = TRAINERS[kind]
    except KeyError:
        raise ValueError(f"unknown trainer kind {kind!r}") from None
    return fn(model, dataset, cfg, eval_data)

