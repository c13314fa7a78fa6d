"""Layer sustainability analysis: per-layer relative errors and the MVL list."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import Model
from .perturb import AttackSpec, NoiseSpec, apply_noise, attack


class ZeroReferenceError(ValueError):
    """Clean representation is all zeros while the perturbed one is not."""


@dataclass(frozen=True)
class CmRecord:
    sample_id: int
    layer: int
    cm_value: float


@dataclass
class LsaStats:
    mu: float
    sigma: float
    per_layer_mean: np.ndarray
    M: int
    eta: float


@dataclass
class MvlList:
    entries: list[tuple[int, float]] = field(default_factory=list)

    @property
    def layers(self) -> list[int]:
        return [l for l, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def format(self) -> str:
        if not self.entries:
            return "MVL: (empty)"
        return "MVL: " + ", ".join(f"L{l} ({cm:.6g})" for l, cm in self.entries)


@dataclass
class LsaReport:
    label: str
    sample_ids: np.ndarray
    cm: np.ndarray  # (M, L_y)
    stats: LsaStats
    mvl: MvlList
    sample_source: str = "test"

    def records(self) -> list[CmRecord]:
        return [CmRecord(int(s), l, float(self.cm[m, l]))
                for m, s in enumerate(self.sample_ids) for l in range(self.cm.shape[1])]

    def cm_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "layer", "cm"])
        for m, s in enumerate(self.sample_ids):
            for l in range(self.cm.shape[1]):
                w.writerow([int(s), l, _fmt(self.cm[m, l])])
        return buf.getvalue()

    def summary_csv(self) -> str:
        flagged = set(self.mvl.layers)
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "mean_cm", "mu", "sigma", "eta", "flagged"])
        for l, v in enumerate(self.stats.per_layer_mean):
            w.writerow([l, _fmt(v), _fmt(self.stats.mu), _fmt(self.stats.sigma), _fmt(self.stats.eta),
                        int(l in flagged)])
        return buf.getvalue()

    def write(self, directory, stem: str) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        a, b = d / f"{stem}_cm.csv", d / f"{stem}_summary.csv"
        a.write_text(self.cm_csv())
        b.write_text(self.summary_csv())
        return a, b


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def comparison_measure(phi_clean, phi_pert) -> float:
    """Relative Frobenius error ||a - b|| / ||a|| of one sample's representation."""
    a = np.asarray(phi_clean, dtype=np.float64)
    b = np.asarray(phi_pert, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    num = np.linalg.norm((a - b).ravel())
    den = np.linalg.norm(a.ravel())
    if den == 0:
        if num == 0:
            return 0.0
        raise ZeroReferenceError("zero-reference representation")
    return float(num / den)


def batch_comparison_measure(phi_clean: np.ndarray, phi_pert: np.ndarray) -> np.ndarray:
    """Per-sample relative error for arrays whose axis 0 indexes samples."""
    n = phi_clean.shape[0]
    a = phi_clean.reshape(n, -1)
    d = a - phi_pert.reshape(n, -1)
    num = np.sqrt(np.einsum("ij,ij->i", d, d))
    den = np.sqrt(np.einsum("ij,ij->i", a, a))
    zero = den == 0
    if np.any(zero & (num > 0)):
        raise ZeroReferenceError("zero-reference representation")
    return np.where(zero, 0.0, num / np.where(zero, 1.0, den))


def _grid_from_records(records) -> np.ndarray:
    records = list(records)
    samples = sorted({r.sample_id for r in records})
    layers = sorted({r.layer for r in records})
    if layers != list(range(len(layers))):
        raise ValueError(f"layer ordinals must be 0..L_y-1, got {layers}")
    row = {s: i for i, s in enumerate(samples)}
    grid = np.full((len(samples), len(layers)), np.nan)
    for r in records:
        if not np.isnan(grid[row[r.sample_id], r.layer]):
            raise ValueError(f"duplicate record for sample {r.sample_id} layer {r.layer}")
        grid[row[r.sample_id], r.layer] = r.cm_value
    if np.isnan(grid).any():
        raise ValueError("incomplete record grid: every sample needs one value per layer")
    return grid


def lsa_stats(records, eta: float = 1.0) -> LsaStats:
    """Population mean/std over all M x L_y values plus per-layer means.

    ``records`` is either an iterable of :class:`CmRecord` or an (M, L_y) array.
    """
    grid = records if isinstance(records, np.ndarray) else _grid_from_records(records)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError("need a non-empty (M, L_y) grid")
    mu = float(grid.mean())
    sigma = float(np.sqrt(((grid - mu) ** 2).mean()))
    return LsaStats(mu, sigma, grid.mean(axis=0), grid.shape[0], float(eta))


def detect_mvl(stats: LsaStats) -> MvlList:
    """Layers whose mean relative error exceeds mu by more than eta * sigma,
    most vulnerable first (ties: lower ordinal first)."""
    hits = [(l, float(v)) for l, v in enumerate(stats.per_layer_mean)
            if v - stats.mu > stats.eta * stats.sigma]
    hits.sort(key=lambda e: (-e[1], e[0]))
    return MvlList(hits)


# candidate cut-offs for eta="auto", strictest first
ETA_CANDIDATES = (3.0, 2.0, 1.5, 1.0, 0.75, 0.5, 0.25, 0.1, 0.05, 0.0)


def tune_eta(grid: np.ndarray, candidates=ETA_CANDIDATES) -> float:
    """Strictest candidate cut-off that flags at least one layer.

    Falls back to the last candidate when no layer sits above the mean
    (for example a constant grid).
    """
    base = lsa_stats(grid, 0.0)
    for eta in candidates:
        base.eta = float(eta)
        if len(detect_mvl(base)):
            return float(eta)
    return float(candidates[-1])


def perturb_batch(model: Model, x, y, perturbation, rng) -> np.ndarray:
    if isinstance(perturbation, AttackSpec):
        return attack(model, x, y, perturbation, rng)
    return apply_noise(x, NoiseSpec(perturbation.kind, perturbation.magnitude,
                                    int(rng.integers(2**31)), perturbation.clamp))


def layer_cm(model: Model, x: np.ndarray, x_pert: np.ndarray, capture: str = "pre",
             batch_size: int = 256) -> np.ndarray:
    """(N, L_y) relative errors between clean and perturbed traces."""
    rows = []
    for i in range(0, len(x), batch_size):
        _, tc = model.forward(x[i:i + batch_size], capture=capture, track_params=False)
        _, tp = model.forward(x_pert[i:i + batch_size], capture=capture, track_params=False)
        rows.append(np.stack([batch_comparison_measure(a.data, b.data) for a, b in zip(tc, tp)], axis=1))
    return np.concatenate(rows, axis=0)


def run_lsa(model: Model, dataset: Dataset, perturbation, M: int = 256, eta: float | str = 1.0, seed: int = 0,
            capture: str = "pre", batch_size: int = 256, sample_source: str = "test",
            exclude_output: bool = False) -> LsaReport:
    """Sample M inputs without replacement, perturb them, compare every
    learnable layer's representation, and flag the most vulnerable layers.

    ``eta="auto"`` picks the cut-off with :func:`tune_eta`.
    ``exclude_output`` leaves the final (logit) layer out of the statistics;
    its relative error is unbounded for samples near the decision boundary.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if M > len(dataset):
        raise ValueError(f"M={M} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(len(dataset), size=M, replace=False))
    x, y = dataset.inputs[ids], dataset.targets[ids]
    parts = [perturb_batch(model, x[i:i + batch_size], y[i:i + batch_size], perturbation, rng)
             for i in range(0, M, batch_size)]
    x_pert = np.concatenate(parts, axis=0)
    cm = layer_cm(model, x, x_pert, capture, batch_size)
    if exclude_output:
        if cm.shape[1] < 2:
            raise ValueError("exclude_output needs at least two learnable layers")
        cm = cm[:, :-1]
    if isinstance(eta, str):
        if eta != "auto":
            raise ValueError(f"eta must be a number or 'auto', got {eta!r}")
        eta = tune_eta(cm)
    stats = lsa_stats(cm, eta)
    return LsaReport(perturbation.label, ids, cm, stats, detect_mvl(stats), sample_source)
