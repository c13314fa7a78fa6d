"""Robust accuracy grids, R&G scores, decision-boundary lattices and report export.

SVG output is written by hand with fixed float formatting so identical
inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .lsa import LsaReport
from .model import Model, predict_from_logits
from .perturb import AttackSpec, attack

# evaluation PGD: 7 iterations of step 0.005
EVAL_PGD_STEPS = 7
EVAL_PGD_STEP = 0.005
DEFAULT_EPSILONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


class BoundaryError(ValueError):
    """Decision-boundary export needs a model with 2-D inputs."""


@dataclass
class RobustGrid:
    epsilons: list[float]
    accuracies: list[float]
    attack: str = "FGSM"
    tag: str = ""

    def __post_init__(self):
        self.epsilons = [float(e) for e in self.epsilons]
        self.accuracies = [float(a) for a in self.accuracies]
        if len(self.epsilons) != len(self.accuracies):
            raise ValueError("one accuracy per epsilon")
        if any(b <= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError(f"epsilons must be strictly ascending, got {self.epsilons}")
        if any(not 0.0 <= a <= 100.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 100]")

    def at(self, eps: float) -> float:
        for e, a in zip(self.epsilons, self.accuracies):
            if math.isclose(e, eps, abs_tol=1e-12):
                return a
        raise KeyError(f"epsilon {eps} not in grid {self.epsilons}")

    @property
    def rg(self) -> float:
        return rg_score(self)


@dataclass
class BoundaryGrid:
    """Class and confidence on a lattice of cell centres plus labelled adversarial points.

    ``box`` is ``(xmin, xmax, ymin, ymax)``; ``classes`` and ``confidence``
    are indexed ``[row, col]`` with rows along y.
    """

    box: tuple[float, float, float, float]
    resolution: tuple[int, int]
    xs: np.ndarray
    ys: np.ndarray
    classes: np.ndarray
    confidence: np.ndarray
    adv_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    adv_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sources: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    adv_fooled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    epsilon: float = 0.0

    def cells(self):
        for r, y in enumerate(self.ys):
            for c, x in enumerate(self.xs):
                yield x, y, int(self.classes[r, c]), float(self.confidence[r, c])


def accuracy(model: Model, dataset: Dataset, inputs: np.ndarray | None = None) -> float:
    """Percent of samples classified correctly (optionally on replacement ``inputs``)."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    x = dataset.inputs if inputs is None else inputs
    return float(100.0 * np.mean(model.predict(x) == dataset.targets))


def _eval_spec(kind: str, eps: float, clamp) -> AttackSpec:
    if kind.upper() == "PGD":
        return AttackSpec("PGD", eps, EVAL_PGD_STEPS, EVAL_PGD_STEP, False, clamp)
    return AttackSpec(kind, eps, clamp=clamp)


def robust_grid(model: Model, dataset: Dataset, attack_kind: str = "FGSM", epsilons=DEFAULT_EPSILONS,
                clamp=None, seed: int = 0, tag: str = "", batch_size: int = 500) -> RobustGrid:
    """Accuracy on every test sample attacked at each epsilon (0 means clean)."""
    eps_list = [float(e) for e in epsilons]
    accs = []
    for j, eps in enumerate(eps_list):
        if eps == 0:
            accs.append(accuracy(model, dataset))
            continue
        spec = _eval_spec(attack_kind, eps, clamp)
        rng = np.random.default_rng([seed, j])
        x, y = dataset.inputs, dataset.targets
        adv = np.concatenate([attack(model, x[i:i + batch_size], y[i:i + batch_size], spec, rng)
                              for i in range(0, len(x), batch_size)])
        accs.append(accuracy(model, dataset, adv))
    return RobustGrid(eps_list, accs, _eval_spec(attack_kind, 1.0, None).kind, tag)


def rg_score(grid) -> float:
    """Robustness-and-generalization score: the sum of the percent accuracies."""
    values = grid.accuracies if isinstance(grid, RobustGrid) else list(grid)
    return math.fsum(float(v) for v in values)


def _confidence(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        p = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return np.maximum(p, 1.0 - p)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).max(axis=1)


def boundary_grid(model: Model, box=None, resolution=(100, 100), spec: AttackSpec | None = None,
                  n_adv: int = 1000, seed: int = 0, dataset: Dataset | None = None,
                  margin: float = 0.5) -> BoundaryGrid:
    """Evaluate a 2-D model on a lattice and attach ``n_adv`` adversarial points.

    The points come from a seeded draw of ``dataset`` (FGSM at 0.3 unless
    ``spec`` says otherwise). Without ``box`` the lattice spans the clean
    and adversarial points padded by ``margin``.
    """
    if model.input_shape != (2,):
        raise BoundaryError(f"decision boundaries need 2-D inputs, model takes {model.input_shape}")
    nx, ny = (resolution, resolution) if isinstance(resolution, int) else resolution
    if nx < 2 or ny < 2:
        raise ValueError("resolution must be >= 2 per axis")
    spec = spec or AttackSpec("FGSM", 0.3)

    adv = np.zeros((0, 2))
    src = np.zeros((0, 2))
    labels = np.zeros(0, dtype=np.int64)
    fooled = np.zeros(0, dtype=bool)
    if dataset is not None and n_adv > 0:
        if n_adv > len(dataset):
            raise ValueError(f"n_adv={n_adv} exceeds dataset size {len(dataset)}")
        rng = np.random.default_rng(seed)
        ids = np.sort(rng.choice(len(dataset), size=n_adv, replace=False))
        src, labels = dataset.inputs[ids], dataset.targets[ids].astype(np.int64)
        adv = attack(model, src, labels, spec, rng)
        fooled = model.predict(adv) != labels

    if box is None:
        pts = np.concatenate([src, adv]) if len(src) else np.array([[-1.5, -1.0], [2.5, 1.5]])
        lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
        box = (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))
    x0, x1, y0, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate box {box}")
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(xs, ys)
    logits = model.logits(np.stack([gx.ravel(), gy.ravel()], axis=1), batch_size=4096)
    return BoundaryGrid((x0, x1, y0, y1), (nx, ny), xs, ys,
                        predict_from_logits(logits).reshape(ny, nx), _confidence(logits).reshape(ny, nx),
                        adv, labels, src, fooled, spec.epsilon)


# CSV ------------------------------------------------------------------------

def _f(v: float) -> str:
    return format(float(v), ".10g")


def _csv(rows) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def robust_grid_csv(grids) -> str:
    rows = [["model_tag", "attack", "epsilon", "accuracy"]]
    for g in grids:
        rows += [[g.tag, g.attack, _f(e), _f(a)] for e, a in zip(g.epsilons, g.accuracies)]
    return _csv(rows)


def leaderboard(grids) -> list[RobustGrid]:
    """Grids sorted by R&G score, best first (ties by tag)."""
    return sorted(grids, key=lambda g: (-rg_score(g), g.tag))


def leaderboard_csv(grids) -> str:
    grids = list(grids)
    if not grids:
        raise ValueError("empty leaderboard")
    eps = grids[0].epsilons
    for g in grids:
        if g.epsilons != eps:
            raise ValueError(f"grid {g.tag!r} uses a different epsilon grid")
    rows = [["model_tag"] + [f"acc@{e:g}" for e in eps] + ["rg_score"]]
    rows += [[g.tag] + [_f(a) for a in g.accuracies] + [_f(rg_score(g))] for g in leaderboard(grids)]
    return _csv(rows)


def boundary_csv(b: BoundaryGrid) -> str:
    return _csv([["x", "y", "class", "confidence"]] +
                [[_f(x), _f(y), c, _f(p)] for x, y, c, p in b.cells()])


def adversarial_points_csv(b: BoundaryGrid) -> str:
    rows = [["x", "y", "true_class", "source_x", "source_y"]]
    rows += [[_f(p[0]), _f(p[1]), int(c), _f(s[0]), _f(s[1])]
             for p, c, s in zip(b.adv_points, b.adv_labels, b.sources)]
    return _csv(rows)


# SVG ------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _n(v: float) -> str:
    return format(round(float(v), 2), ".2f")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f"<title>{_esc(title)}</title>",
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _axes(x0, y0, x1, y1) -> list[str]:
    return [f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']


def lsa_curve_svg(reports: list[LsaReport], title: str = "Mean relative error per learnable layer") -> str:
    """One polyline per report: layer ordinal vs mean CM, flagged layers circled."""
    if not reports:
        raise ValueError("no LSA reports to plot")
    W, H, L, R, Tp, B = 560, 340, 60, 160, 30, 40
    nl = max(len(r.stats.per_layer_mean) for r in reports)
    ymax = max(float(np.max(r.stats.per_layer_mean)) for r in reports) or 1.0
    ymax *= 1.1
    px = lambda l: L + (W - L - R) * (l / max(nl - 1, 1))  # noqa: E731
    py = lambda v: H - B - (H - Tp - B) * (v / ymax)  # noqa: E731
    body = _axes(L, Tp, W - R, H - B)
    for l in range(nl):
        body.append(f'<text x="{_n(px(l))}" y="{H - B + 15}" text-anchor="middle">L{l}</text>')
    for k in range(5):
        v = ymax * k / 4
        body.append(f'<text x="{L - 5}" y="{_n(py(v) + 4)}" text-anchor="end">{v:.3g}</text>')
    for i, r in enumerate(reports):
        color = PALETTE[i % len(PALETTE)]
        means = r.stats.per_layer_mean
        pts = " ".join(f"{_n(px(l))},{_n(py(v))}" for l, v in enumerate(means))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        flagged = set(r.mvl.layers)
        for l, v in enumerate(means):
            rad = 5 if l in flagged else 3
            body.append(f'<circle cx="{_n(px(l))}" cy="{_n(py(v))}" r="{rad}" fill="{color}"/>')
        ly = Tp + 15 * i + 10
        body.append(f'<rect x="{W - R + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{W - R + 25}" y="{ly + 1}">{_esc(r.label)}</text>')
    return _svg(W, H, body, title)


def rg_histogram_svg(grids, title: str = "R&G score") -> str:
    """Horizontal bars of R&G score, best first."""
    grids = leaderboard(grids)
    if not grids:
        raise ValueError("no grids to plot")
    bar, gap, L, Rm, Tp = 18, 6, 170, 70, 30
    W = 620
    H = Tp + len(grids) * (bar + gap) + 20
    top = max(rg_score(g) for g in grids) or 1.0
    body = []
    for i, g in enumerate(grids):
        y = Tp + i * (bar + gap)
        w = (W - L - Rm) * rg_score(g) / top
        body.append(f'<text x="{L - 6}" y="{y + bar - 5}" text-anchor="end">{_esc(g.tag)}</text>')
        body.append(f'<rect x="{L}" y="{y}" width="{_n(w)}" height="{bar}" '
                    f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        body.append(f'<text x="{_n(L + w + 4)}" y="{y + bar - 5}">{rg_score(g):.2f}</text>')
    return _svg(W, H, body, title)


def _blend(hex_color: str, conf: float) -> str:
    # fade class colour towards white as confidence drops to 0.5
    t = min(max((conf - 0.5) * 2.0, 0.0), 1.0) * 0.6 + 0.15
    rgb = [int(hex_color[i:i + 2], 16) for i in (1, 3, 5)]
    mixed = [round(255 + (c - 255) * t) for c in rgb]
    return "#" + "".join(f"{c:02x}" for c in mixed)


def boundary_svg(b: BoundaryGrid, title: str = "Decision boundary", size: int = 500) -> str:
    """Heatmap of predicted class (shaded by confidence) with adversarial points on top."""
    nx, ny = b.resolution
    x0, x1, y0, y1 = b.box
    Tp = 25
    cw, ch = size / nx, size / ny
    sx = lambda x: (x - x0) / (x1 - x0) * size  # noqa: E731
    sy = lambda y: Tp + (y1 - y) / (y1 - y0) * size  # noqa: E731
    body = []
    for r in range(ny):
        for c in range(nx):
            color = _blend(PALETTE[int(b.classes[r, c]) % len(PALETTE)], float(b.confidence[r, c]))
            body.append(f'<rect x="{_n(c * cw)}" y="{_n(Tp + (ny - 1 - r) * ch)}" width="{_n(cw + 0.3)}" '
                        f'height="{_n(ch + 0.3)}" fill="{color}"/>')
    for p, lab, bad in zip(b.adv_points, b.adv_labels, b.adv_fooled):
        stroke = "black" if bad else "white"
        body.append(f'<circle cx="{_n(sx(p[0]))}" cy="{_n(sy(p[1]))}" r="2.5" '
                    f'fill="{PALETTE[int(lab) % len(PALETTE)]}" stroke="{stroke}" stroke-width="0.6"/>')
    return _svg(size, size + Tp, body, title)


# export -----------------------------------------------------------------------

def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def export_report(out_dir, grids=(), reports=(), boundary: BoundaryGrid | None = None,
                  boundary_title: str = "Decision boundary") -> list[Path]:
    """Write every available table and chart into ``out_dir``; return the paths."""
    out = Path(out_dir)
    written = []
    grids, reports = list(grids), list(reports)
    if grids:
        written.append(_write(out / "robust_grid.csv", robust_grid_csv(grids)))
        written.append(_write(out / "leaderboard.csv", leaderboard_csv(grids)))
        written.append(_write(out / "rg_histogram.svg", rg_histogram_svg(grids)))
    for r in reports:
        stem = _stem(r.label)
        written.append(_write(out / f"lsa_{stem}_cm.csv", r.cm_csv()))
        written.append(_write(out / f"lsa_{stem}_summary.csv", r.summary_csv()))
    if reports:
        written.append(_write(out / "lsa_curves.svg", lsa_curve_svg(reports)))
    if boundary is not None:
        written.append(_write(out / "boundary.csv", boundary_csv(boundary)))
        written.append(_write(out / "adversarial_points.csv", adversarial_points_csv(boundary)))
        written.append(_write(out / "boundary.svg", boundary_svg(boundary, boundary_title)))
    return written


def _stem(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label).strip("_")
