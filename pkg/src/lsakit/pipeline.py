"""Run stages shared by the command line: train, analyse, evaluate, draw, reproduce."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, dump, parse_variant, variant_config, _split
from .data import Dataset, load_mnist, moon_splits
from .evaluation import (BoundaryGrid, RobustGrid, boundary_grid, export_report, lsa_curve_svg,
                         robust_grid)
from .lsa import LsaReport, run_lsa
from .model import Model
from .perturb import AttackSpec
from .training import TrainLog, train

log = logging.getLogger("lsakit")


class ArchitectureMismatch(ValueError):
    """Checkpoint does not match the configured model."""


class StageError(RuntimeError):
    """Failure inside one stage of a reproduction suite."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "moon":
        return moon_splits(d.n_train, d.n_test, d.noise, d.seed)
    train_ds, test_ds = load_mnist(d.path, "train"), load_mnist(d.path, "test")
    # subsets are drawn with a fixed stream independent of the run seed
    if d.train_subset and d.train_subset < len(train_ds):
        idx = np.sort(np.random.default_rng([0, 1]).choice(len(train_ds), d.train_subset, replace=False))
        train_ds = train_ds.subset(idx)
    if d.test_subset and d.test_subset < len(test_ds):
        idx = np.sort(np.random.default_rng([0, 2]).choice(len(test_ds), d.test_subset, replace=False))
        test_ds = test_ds.subset(idx)
    return train_ds, test_ds


def write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def snapshot(cfg: RunConfig, out: Path) -> Path:
    return write_text(out / "resolved.cfg", dump(cfg))


def check_architecture(cfg: RunConfig, model: Model, source) -> None:
    want = cfg.build_model()
    if want.describe() != model.describe() or want.input_shape != model.input_shape:
        raise ArchitectureMismatch(
            f"{source}: checkpoint holds {model.describe()} on {model.input_shape}, "
            f"config expects {want.describe()} on {want.input_shape}")


def load_checkpoint(cfg: RunConfig, path) -> Model:
    model = checkpoint.load(path)
    check_architecture(cfg, model, path)
    return model


# stages ------------------------------------------------------------------

def train_stage(cfg: RunConfig, out: Path, name: str = "model",
                data: tuple[Dataset, Dataset] | None = None) -> tuple[Model, TrainLog, str]:
    """Train per ``cfg.trainer``; write ``<name>.ckpt`` (+ meta) and ``<name>_train_log.csv``."""
    train_ds, test_ds = data or load_data(cfg)
    tcfg = cfg.train_config()
    model, tlog = train(cfg.build_model(), train_ds, tcfg, cfg.trainer.kind, eval_data=test_ds)
    log_name = "train_log.csv" if name == "model" else f"{name}_train_log.csv"
    write_text(out / log_name, tlog.to_csv())
    digest = hashlib.sha256(dump(cfg).encode()).hexdigest()[:16]
    sha = checkpoint.save(model, out / f"{name}.ckpt",
                          {"seed": cfg.trainer.seed, "epoch": cfg.trainer.epochs, "config_hash": digest,
                           "trainer": cfg.trainer.kind})
    return model, tlog, sha


def lsa_stage(cfg: RunConfig, model: Model, test_ds: Dataset, train_ds: Dataset | None = None) -> list[LsaReport]:
    s = cfg.lsa
    source = train_ds if s.sample_source == "train" and train_ds is not None else test_ds
    return [run_lsa(model, source, p, s.M, cfg.eta(), s.seed, s.capture, sample_source=s.sample_source,
                    exclude_output=s.exclude_output)
            for p in cfg.perturbations()]


def eval_stage(cfg: RunConfig, model: Model, test_ds: Dataset, tag: str) -> RobustGrid:
    return robust_grid(model, test_ds, cfg.eval.attack, cfg.epsilons, cfg.clamp, cfg.eval.seed, tag)


def boundary_stage(cfg: RunConfig, model: Model, test_ds: Dataset) -> BoundaryGrid:
    b = cfg.boundary
    spec = AttackSpec(b.attack, b.epsilon, clamp=cfg.clamp)
    n_adv = min(b.n_adv, len(test_ds))
    return boundary_grid(model, None, (b.resolution, b.resolution), spec, n_adv, b.seed, test_ds)


# reproduction suite ------------------------------------------------------

@dataclass
class VariantResult:
    name: str
    grid: RobustGrid
    reports: list[LsaReport]
    checkpoint_sha: str


def _run_variant(cfg: RunConfig, name: str, out: str) -> VariantResult:
    out = Path(out)
    v = parse_variant(name)
    vcfg = variant_config(cfg, v)
    tag = f"{cfg.repro.suite}-{v.name}"
    try:
        data = load_data(vcfg)
        model, _, sha = train_stage(vcfg, out / "checkpoints", tag, data)
        grid = eval_stage(vcfg, model, data[1], v.name)
        lsa_all = cfg.repro.lsa_variants.strip().lower() == "all"
        wanted = lsa_all or v.name in [parse_variant(n).name for n in _split(cfg.repro.lsa_variants)]
        reports = lsa_stage(vcfg, model, data[1], data[0]) if wanted else []
        for r in reports:
            r.label = f"{v.name} {r.label}"
    except Exception as e:  # surfaced with the variant as stage context
        raise StageError(f"variant {v.name}", e) from e
    log.info("%s done: rg=%.2f", v.name, grid.rg)
    return VariantResult(v.name, grid, reports, sha)


def repro(cfg: RunConfig, out, jobs: int = 1) -> list[VariantResult]:
    """Train, evaluate and analyse every configured variant; write the suite report."""
    out = Path(out)
    snapshot(cfg, out)
    names = [parse_variant(n).name for n in _split(cfg.repro.variants)]
    if not names:
        raise StageError("setup", ValueError("repro.variants is empty"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_variant, [cfg] * len(names), names, [str(out)] * len(names)))
    else:
        results = [_run_variant(cfg, n, str(out)) for n in names]

    reports = [r for res in results for r in res.reports]
    export_report(out, [res.grid for res in results])
    for res in results:
        for r in res.reports:
            r.write(out / "lsa", _stem(r.label))
    by_kind: dict[str, list[LsaReport]] = {}
    for r in reports:
        by_kind.setdefault(r.label.split(" ", 1)[1], []).append(r)
    for kind, group in sorted(by_kind.items()):
        write_text(out / "lsa" / f"curves_{_stem(kind)}.svg", lsa_curve_svg(group, f"Layer relative error, {kind}"))
    write_text(out / "mvl.txt", "".join(f"{r.label}: {r.mvl.format()} (eta={r.stats.eta:g})\n" for r in reports))

    for name in _split(cfg.repro.boundary_variants):
        v = parse_variant(name)
        try:
            model = checkpoint.load(out / "checkpoints" / f"{cfg.repro.suite}-{v.name}.ckpt")
            _, test_ds = load_data(variant_config(cfg, v))
            grid = boundary_stage(cfg, model, test_ds)
            export_report(out / "boundary" / v.name, boundary=grid, boundary_title=f"{v.name} decision boundary")
        except Exception as e:
            raise StageError(f"boundary {v.name}", e) from e
    return results


def _stem(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label).strip("_")


def seeded(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else cfg.with_seed(seed)


def with_output(cfg: RunConfig, out) -> RunConfig:
    return cfg if out is None else replace(cfg, output=replace(cfg.output, dir=str(out)))
