"""Layer sustainability analysis and layer-wise regularized adversarial training.

A float64 numpy autodiff core with numba-accelerated conv/pool kernels,
L-infinity attacks, per-layer relative-error analysis, adversarial
trainers and evaluation/report tooling.
"""

from .data import Dataset, load_mnist, load_mnist_idx, make_moons, moon_splits
from .evaluation import RobustGrid, accuracy, boundary_grid, rg_score, robust_grid
from .lsa import LsaReport, comparison_measure, detect_mvl, lsa_stats, run_lsa
from .model import Model, build, model_a, model_b
from .perturb import AttackSpec, NoiseSpec, attack, fgsm, pgd
from .training import TrainConfig, train, train_at, train_at_lr, train_standard, train_trade

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "Dataset", "LsaReport", "Model", "NoiseSpec", "RobustGrid", "TrainConfig",
    "accuracy", "attack", "boundary_grid", "build", "comparison_measure", "detect_mvl", "fgsm",
    "load_mnist", "load_mnist_idx", "lsa_stats", "make_moons", "model_a", "model_b", "moon_splits",
    "pgd", "rg_score", "robust_grid", "run_lsa", "train", "train_at", "train_at_lr", "train_standard",
    "train_trade",
]
