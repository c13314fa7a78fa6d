"""INI run configuration with suite presets and a resolved snapshot writer.

Every section is flat ``key = value``. Reading a config starts from the
preset of its ``dataset.kind`` and overrides whatever the file sets, so a
snapshot written by :func:`dump` reproduces the run exactly when read back.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import mnist_dir
from .model import ARCHITECTURES, ELU, Conv2D, Flatten, Linear, MaxPool2D, Model, ReLU, build
from .perturb import ATTACK_KINDS, NOISE_KINDS, AttackSpec, NoiseSpec
from .training import TrainConfig

TRAINER_KINDS = ("standard", "at", "trade", "at_lr", "trade_lr")


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` is the ``section.key`` path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DatasetSection:
    kind: str = "moon"
    n_train: int = 1000
    n_test: int = 1000
    noise: float = 0.2
    seed: int = 0
    path: str = ""
    train_subset: int = 0
    test_subset: int = 0


@dataclass
class ModelSection:
    arch: str = "A"
    layers: str = ""
    input_shape: str = ""
    seed: int = 0


@dataclass
class TrainerSection:
    kind: str = "standard"
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    attack: str = "PGD"
    epsilon: float = 0.3
    steps: int = 10
    step_size: str = "auto"
    clamp: str = "none"
    mix: bool = False
    delta: float = 0.5
    lam: float = 1.0
    mvl: str = ""
    gamma: str = "0.1"
    detach_denominator: bool = False
    seed: int = 0
    eval_epsilon: float = 0.3
    log_eval_size: int = 1000
    eps_warmup: float = 0.0


@dataclass
class LsaSection:
    M: int = 256
    eta: str = "auto"
    capture: str = "pre"
    exclude_output: bool = True
    perturbations: str = "PGD:0.3"
    seed: int = 0
    sample_source: str = "test"


@dataclass
class EvalSection:
    attack: str = "FGSM"
    epsilons: str = "0, 0.1, 0.2, 0.3, 0.4, 0.5"
    seed: int = 0


@dataclass
class BoundarySection:
    resolution: int = 100
    n_adv: int = 1000
    attack: str = "FGSM"
    epsilon: float = 0.3
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class ReproSection:
    suite: str = "moon"
    variants: str = ""
    boundary_variants: str = ""
    lsa_variants: str = "all"


SECTIONS = {
    "dataset": DatasetSection, "model": ModelSection, "trainer": TrainerSection, "lsa": LsaSection,
    "eval": EvalSection, "boundary": BoundarySection, "output": OutputSection, "repro": ReproSection,
}

MOON_VARIANTS = ("Normal, AT-FGSM, AT-PGD, AT-TRADE, AT-FAST, "
                 "AT-FGSM-LR-L0, AT-FGSM-LR-L1, AT-FGSM-LR-L2, "
                 "AT-PGD-LR-L0, AT-PGD-LR-L1, AT-PGD-LR-L2, "
                 "AT-FAST-LR-L0, AT-FAST-LR-L1, AT-FAST-LR-L2, "
                 "AT-TRADE-LR-L0, AT-TRADE-LR-L1, AT-TRADE-LR-L2")
MNIST_VARIANTS = "Normal, AT-PGD, AT-PGD-LR-L0"


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    lsa: LsaSection = field(default_factory=LsaSection)
    eval: EvalSection = field(default_factory=EvalSection)
    boundary: BoundarySection = field(default_factory=BoundarySection)
    output: OutputSection = field(default_factory=OutputSection)
    repro: ReproSection = field(default_factory=ReproSection)

    # derived views ---------------------------------------------------------

    @property
    def clamp(self) -> tuple[float, float] | None:
        return parse_clamp(self.trainer.clamp, "trainer.clamp")

    @property
    def epsilons(self) -> list[float]:
        return parse_floats(self.eval.epsilons, "eval.epsilons")

    def mvl_layers(self) -> list[int]:
        return parse_ints(self.trainer.mvl, "trainer.mvl")

    def gamma_map(self) -> dict[int, float]:
        return parse_gamma(self.trainer.gamma, self.mvl_layers(), "trainer.gamma")

    def attack_spec(self) -> AttackSpec | None:
        t = self.trainer
        if t.attack.lower() == "none":
            return None
        step = None if t.step_size == "auto" else _num(t.step_size, "trainer.step_size")
        kind = t.attack.upper()
        return AttackSpec(kind, t.epsilon, t.steps, step, kind in ("PGD", "FAST"), self.clamp)

    def train_config(self) -> TrainConfig:
        t = self.trainer
        gamma = self.gamma_map() if t.kind.endswith("_lr") else {}
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, beta1=t.beta1, beta2=t.beta2,
                           adam_eps=t.adam_eps, attack=self.attack_spec(), mix=t.mix, delta=t.delta, lam=t.lam,
                           gamma=gamma, detach_denominator=t.detach_denominator, seed=t.seed,
                           eval_epsilon=t.eval_epsilon, eval_clamp=self.clamp, log_eval_size=t.log_eval_size,
                           eps_warmup=t.eps_warmup)

    def perturbations(self) -> list:
        out = []
        for item in _split(self.lsa.perturbations):
            kind, _, mag = item.partition(":")
            kind = kind.strip()
            value = _num(mag or "0.3", "lsa.perturbations")
            if kind.upper() in ATTACK_KINDS:
                k = kind.upper()
                out.append(AttackSpec.pgd(value, clamp=self.clamp) if k == "PGD"
                           else AttackSpec(k, value, clamp=self.clamp))
            else:
                out.append(NoiseSpec(kind.capitalize(), value, self.lsa.seed, self.clamp))
        return out

    def eta(self) -> float | str:
        return "auto" if self.lsa.eta == "auto" else _num(self.lsa.eta, "lsa.eta")

    def build_model(self) -> Model:
        m = self.model
        if m.layers.strip():
            shape = tuple(parse_ints(m.input_shape, "model.input_shape"))
            return Model(parse_layers(m.layers), shape, m.seed)
        return build(m.arch, m.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self,
                       dataset=replace(self.dataset, seed=seed), model=replace(self.model, seed=seed),
                       trainer=replace(self.trainer, seed=seed), lsa=replace(self.lsa, seed=seed),
                       eval=replace(self.eval, seed=seed), boundary=replace(self.boundary, seed=seed))


# presets -----------------------------------------------------------------

def preset(kind: str) -> RunConfig:
    """Defaults for one dataset kind (moon or mnist)."""
    if kind == "moon":
        cfg = RunConfig()
        cfg.repro = ReproSection("moon", MOON_VARIANTS, "AT-TRADE, AT-TRADE-LR-L2", "all")
        return cfg
    if kind == "mnist":
        # scaled for one CPU core: short PGD, five epochs, fixed test subset;
        # the warm-up keeps Model B from collapsing under full-strength PGD
        return RunConfig(
            dataset=DatasetSection(kind="mnist", path=str(mnist_dir()), train_subset=10000, test_subset=2000),
            model=ModelSection(arch="B"),
            trainer=TrainerSection(epochs=5, steps=3, step_size="0.1", clamp="0,1", eps_warmup=1.0),
            lsa=LsaSection(),
            eval=EvalSection(),
            repro=ReproSection("mnist", MNIST_VARIANTS, "", "all"),
        )
    raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}; expected moon or mnist")


def full_scale(cfg: RunConfig) -> RunConfig:
    """The ``--full`` switch: whole train and test splits, 100 epochs."""
    return replace(cfg, dataset=replace(cfg.dataset, train_subset=0, test_subset=0),
                   trainer=replace(cfg.trainer, epochs=100))


# parsing -----------------------------------------------------------------

_LAYER_RE = re.compile(r"^\s*(\w+)\s*(?:\(([^)]*)\))?\s*$")
_LAYER_CTORS = {"linear": Linear, "conv2d": Conv2D, "relu": ReLU, "elu": ELU, "maxpool2d": MaxPool2D,
                "flatten": Flatten}


def parse_layers(text: str):
    """``"Linear(100) => ELU => Linear(1)"`` (``=>`` or ``;`` separated) to layer specs."""
    layers = []
    for part in re.split(r"=>|;", text):
        if not part.strip():
            continue
        m = _LAYER_RE.match(part)
        if not m or m.group(1).lower() not in _LAYER_CTORS:
            raise ConfigError("model.layers", f"cannot parse layer {part.strip()!r}")
        args = [a.strip().lower().replace("x", ",") for a in (m.group(2) or "").split(",") if a.strip()]
        nums = [float(v) for a in args for v in a.split(",") if v]
        ctor = _LAYER_CTORS[m.group(1).lower()]
        try:
            if ctor is ELU:
                layers.append(ELU(*nums))
            else:
                layers.append(ctor(*[int(v) for v in nums]))
        except TypeError:
            raise ConfigError("model.layers", f"wrong arguments for {part.strip()!r}") from None
    if not layers:
        raise ConfigError("model.layers", "empty layer list")
    return layers


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _num(text: str, path: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(path, f"expected a number, got {text!r}") from None


def parse_floats(text: str, path: str) -> list[float]:
    return [_num(p, path) for p in _split(text)]


def parse_ints(text: str, path: str) -> list[int]:
    try:
        return [int(p) for p in _split(text)]
    except ValueError:
        raise ConfigError(path, f"expected comma-separated integers, got {text!r}") from None


def parse_clamp(text: str, path: str) -> tuple[float, float] | None:
    if text.strip().lower() in ("", "none"):
        return None
    vals = parse_floats(text, path)
    if len(vals) != 2 or vals[0] >= vals[1]:
        raise ConfigError(path, f"expected 'lo, hi' with lo < hi, got {text!r}")
    return vals[0], vals[1]


def parse_gamma(text: str, layers: list[int], path: str) -> dict[int, float]:
    """Either one uniform value for every layer in ``layers`` or ``l:g`` pairs."""
    text = text.strip()
    if ":" not in text:
        g = _num(text or "0.1", path)
        return {l: g for l in layers}
    out = {}
    for item in _split(text):
        l, _, g = item.partition(":")
        try:
            out[int(l)] = _num(g, path)
        except ValueError:
            raise ConfigError(path, f"bad layer ordinal in {item!r}") from None
    return out


def _coerce(value: str, typ, path: str):
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    if typ in (int, "int"):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(path, f"expected an integer, got {value!r}") from None
    if typ in (float, "float"):
        return _num(value, path)
    return value.strip()


def from_parser(cp: configparser.ConfigParser) -> RunConfig:
    kind = cp.get("dataset", "kind", fallback="moon").strip().lower()
    cfg = preset(kind)
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
        section = getattr(cfg, name)
        known = {f.name: f.type for f in fields(section)}
        for key, raw in cp.items(name):
            match = next((k for k in known if k.lower() == key.lower()), None)
            if match is None:
                raise ConfigError(f"{name}.{key}", "unknown key")
            setattr(section, match, _coerce(raw, known[match], f"{name}.{key}"))
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"no such file: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:
        raise ConfigError("--config", f"{path}: {e}") from None
    return from_parser(cp)


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    return from_parser(cp)


def validate(cfg: RunConfig) -> None:
    d, m, t, s = cfg.dataset, cfg.model, cfg.trainer, cfg.lsa
    if d.kind not in ("moon", "mnist"):
        raise ConfigError("dataset.kind", f"unknown dataset kind {d.kind!r}")
    if d.kind == "moon" and (d.n_train < 2 or d.n_test < 2):
        raise ConfigError("dataset.n_train", "moon splits need at least 2 samples each")
    if d.noise < 0:
        raise ConfigError("dataset.noise", "must be >= 0")
    if d.kind == "mnist" and not Path(d.path).is_dir():
        raise ConfigError("dataset.path", f"MNIST directory does not exist: {d.path}")
    if d.train_subset < 0 or d.test_subset < 0:
        raise ConfigError("dataset.train_subset", "must be >= 0 (0 means the whole split)")
    if not m.layers.strip() and m.arch.upper() not in ARCHITECTURES:
        raise ConfigError("model.arch", f"unknown architecture {m.arch!r}; expected A or B")
    if m.layers.strip():
        parse_layers(m.layers)
        if not parse_ints(m.input_shape, "model.input_shape"):
            raise ConfigError("model.input_shape", "required with an inline layer list")
    if t.kind not in TRAINER_KINDS:
        raise ConfigError("trainer.kind", f"unknown trainer kind {t.kind!r}; expected one of {TRAINER_KINDS}")
    if t.attack.lower() != "none" and t.attack.upper() not in ATTACK_KINDS:
        raise ConfigError("trainer.attack", f"unknown attack {t.attack!r}")
    if t.kind != "standard" and t.attack.lower() == "none":
        raise ConfigError("trainer.attack", f"trainer kind {t.kind} needs an attack")
    if t.epochs < 0:
        raise ConfigError("trainer.epochs", "must be >= 0")
    if t.batch_size < 1:
        raise ConfigError("trainer.batch_size", "must be >= 1")
    if t.lr <= 0:
        raise ConfigError("trainer.lr", "must be > 0")
    if t.epsilon < 0:
        raise ConfigError("trainer.epsilon", "must be >= 0")
    if t.steps < 1:
        raise ConfigError("trainer.steps", "must be >= 1")
    if t.step_size != "auto" and _num(t.step_size, "trainer.step_size") <= 0:
        raise ConfigError("trainer.step_size", "must be > 0 or auto")
    if not 0 <= t.delta <= 1:
        raise ConfigError("trainer.delta", "must lie in [0, 1]")
    if t.lam < 0:
        raise ConfigError("trainer.lam", "must be >= 0")
    if t.eps_warmup < 0:
        raise ConfigError("trainer.eps_warmup", "must be >= 0 (epochs)")
    cfg.clamp
    layers = cfg.mvl_layers()
    gamma = cfg.gamma_map()
    if any(g < 0 for g in gamma.values()):
        raise ConfigError("trainer.gamma", "every gamma must be >= 0")
    if t.kind.endswith("_lr") and not layers and not gamma:
        raise ConfigError("trainer.mvl", f"trainer kind {t.kind} needs at least one regularized layer")
    n_learn = cfg.build_model().num_learnable if not m.layers.strip() else \
        sum(1 for l in parse_layers(m.layers) if l.learnable)
    for l in list(layers) + list(gamma):
        if not 0 <= l < n_learn:
            raise ConfigError("trainer.mvl", f"layer {l} is not a learnable layer ordinal (< {n_learn})")
    if s.M < 1:
        raise ConfigError("lsa.M", "must be >= 1")
    if s.eta != "auto" and _num(s.eta, "lsa.eta") < 0:
        raise ConfigError("lsa.eta", "must be >= 0 or auto")
    if s.capture not in ("pre", "post"):
        raise ConfigError("lsa.capture", "must be pre or post")
    if s.sample_source not in ("test", "train"):
        raise ConfigError("lsa.sample_source", "must be test or train")
    for item in _split(s.perturbations):
        kind = item.partition(":")[0].strip()
        if kind.upper() not in ATTACK_KINDS and kind.capitalize() not in NOISE_KINDS:
            raise ConfigError("lsa.perturbations", f"unknown perturbation {kind!r}")
    cfg.perturbations()
    eps = cfg.epsilons
    if not eps or eps[0] != 0 or any(b <= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("eval.epsilons", "must be strictly ascending and start at 0")
    if cfg.eval.attack.upper() not in ATTACK_KINDS:
        raise ConfigError("eval.attack", f"unknown attack {cfg.eval.attack!r}")
    if cfg.boundary.resolution < 2:
        raise ConfigError("boundary.resolution", "must be >= 2")
    if cfg.boundary.n_adv < 0:
        raise ConfigError("boundary.n_adv", "must be >= 0")
    if cfg.boundary.attack.upper() not in ATTACK_KINDS:
        raise ConfigError("boundary.attack", f"unknown attack {cfg.boundary.attack!r}")
    if cfg.repro.suite not in ("moon", "mnist"):
        raise ConfigError("repro.suite", f"unknown suite {cfg.repro.suite!r}")
    for v in _split(cfg.repro.variants):
        parse_variant(v)


def dump(cfg: RunConfig) -> str:
    """Every field of every section, defaults included, in a fixed order."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            v = getattr(section, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


# variants ----------------------------------------------------------------

_VARIANT_RE = re.compile(r"^AT-(FGSM|PGD|FAST|TRADE)(?:-LR-((?:L\d+)+))?$", re.IGNORECASE)


@dataclass(frozen=True)
class Variant:
    name: str
    kind: str
    attack: str | None
    layers: tuple[int, ...] = ()


def parse_variant(name: str) -> Variant:
    """``Normal``, ``AT-<attack>`` or ``AT-<attack>-LR-L<l>[L<l>...]``."""
    name = name.strip()
    if name.lower() == "normal":
        return Variant("Normal", "standard", None)
    m = _VARIANT_RE.match(name)
    if not m:
        raise ConfigError("repro.variants", f"cannot parse variant {name!r}")
    atk = m.group(1).upper()
    layers = tuple(int(v) for v in re.findall(r"\d+", m.group(2) or ""))
    base = "trade" if atk == "TRADE" else "at"
    kind = base + ("_lr" if layers else "")
    return Variant(f"AT-{atk}" + (f"-LR-{m.group(2).upper()}" if layers else ""), kind,
                   "PGD" if atk == "TRADE" else atk, layers)


def variant_config(cfg: RunConfig, v: Variant) -> RunConfig:
    """Trainer section for one suite row; attack budget and gamma come from ``cfg``."""
    t = cfg.trainer
    trainer = replace(t, kind=v.kind, attack=v.attack or t.attack, mvl=",".join(map(str, v.layers)))
    return replace(cfg, trainer=trainer)
