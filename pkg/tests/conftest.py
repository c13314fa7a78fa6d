import os
from pathlib import Path

import numpy as np
import pytest

from lsakit import _kernels

ROOT = Path(__file__).resolve().parents[1]


def mnist_path() -> Path:
    return Path(os.environ.get("LSAKIT_MNIST_DIR") or ROOT / "data" / "mnist")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"] if _kernels.HAVE_NUMBA else ["numpy"])
def backend(request):
    before = _kernels.get_backend()
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(before)


@pytest.fixture(scope="session")
def mnist_dir():
    d = mnist_path()
    if not (d / "train-images-idx3-ubyte").exists() and not (d / "train-images-idx3-ubyte.gz").exists():
        pytest.fail(f"MNIST IDX files not found in {d}; set LSAKIT_MNIST_DIR")
    return d


# one PASS/FAIL line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(request) -> dict:
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter):
    results = terminalreporter.config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.split()[0].rstrip("abcdefgh")), k)):
        ok, detail = results[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
