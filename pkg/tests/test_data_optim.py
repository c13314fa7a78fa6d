import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsakit import data as D
from lsakit.optim import Adam
from lsakit.tensor import Tensor


def write_idx(path, arr, magic):
    arr = np.asarray(arr, dtype=np.uint8)
    head = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(head + arr.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.arange(3 * 28 * 28).reshape(3, 28, 28) % 256
    write_idx(tmp_path / "img.gz", imgs, D.IMAGE_MAGIC)
    write_idx(tmp_path / "lab", [7, 0, 9], D.LABEL_MAGIC)
    return tmp_path / "img.gz", tmp_path / "lab", imgs


def test_idx_parse(idx_pair):
    img, lab, imgs = idx_pair
    ds = D.load_mnist_idx(img, lab, "test")
    assert ds.inputs.shape == (3, 1, 28, 28)
    assert ds.inputs.dtype == np.float64
    np.testing.assert_array_equal(ds.inputs[:, 0] * 255, imgs)
    np.testing.assert_array_equal(ds.targets, [7, 0, 9])
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1


def test_idx_errors(tmp_path, idx_pair):
    img, lab, _ = idx_pair
    write_idx(tmp_path / "bad", [1, 2], 0x0802)
    with pytest.raises(D.IdxMagicError):
        D.load_mnist_idx(img, tmp_path / "bad")
    (tmp_path / "short").write_bytes(struct.pack(">I", D.LABEL_MAGIC) + struct.pack(">I", 10) + b"\1\2")
    with pytest.raises(D.IdxTruncatedError):
        D.load_mnist_idx(img, tmp_path / "short")
    write_idx(tmp_path / "two", [1, 2], D.LABEL_MAGIC)
    with pytest.raises(D.IdxCountMismatchError):
        D.load_mnist_idx(img, tmp_path / "two")
    write_idx(tmp_path / "big", [1, 2, 11], D.LABEL_MAGIC)
    with pytest.raises(D.DataError):
        D.load_mnist_idx(img, tmp_path / "big")
    with pytest.raises(FileNotFoundError):
        D.load_mnist(tmp_path / "nowhere")


def test_fetch_needs_mirror(monkeypatch, tmp_path):
    monkeypatch.delenv(D.MIRROR_ENV, raising=False)
    with pytest.raises(D.DataError, match=D.MIRROR_ENV):
        D.fetch_mnist(tmp_path)


def test_real_mnist_is_in_range(mnist_dir):
    ds = D.load_mnist(mnist_dir, "test")
    assert ds.inputs.shape == (10000, 1, 28, 28)
    assert 0.0 <= ds.inputs.min() and ds.inputs.max() <= 1.0
    assert set(np.unique(ds.targets)) == set(range(10))


def test_moons_are_seeded_and_split():
    a, b = D.moon_splits(200, 100, 0.2, 3)
    c, _ = D.moon_splits(200, 100, 0.2, 3)
    np.testing.assert_array_equal(a.inputs, c.inputs)
    assert len(a) == 200 and len(b) == 100
    assert a.split == "train" and b.split == "test"
    assert np.all(np.isfinite(a.inputs))
    with pytest.raises(D.DataError):
        D.make_moons(1)


def test_moons_csv(tmp_path):
    ds = D.make_moons(5, seed=1)
    ds.to_csv(tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "x1,x2,label" and len(rows) == 6
    assert float(rows[1].split(",")[0]) == ds.inputs[0, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 70), st.booleans(), st.integers(0, 100), st.integers(0, 5))
def test_batches_cover_every_sample_once(n, bs, shuffle, seed, epoch):
    ds = D.Dataset(np.arange(n, dtype=np.float64)[:, None], np.zeros(n, dtype=np.int64))
    got = [b for b in D.batches(ds, bs, shuffle, seed, epoch)]
    seen = np.concatenate([x[:, 0] for x, _ in got])
    assert sorted(seen) == list(range(n))
    assert all(len(x) == bs for x, _ in got[:-1])
    again = np.concatenate([x[:, 0] for x, _ in D.batches(ds, bs, shuffle, seed, epoch)])
    np.testing.assert_array_equal(seen, again)


def test_dataset_validation():
    with pytest.raises(D.DataError):
        D.Dataset(np.zeros((3, 2)), np.zeros(2, dtype=np.int64))
    with pytest.raises(D.DataError):
        D.Dataset(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(ValueError):
        next(D.batches(D.make_moons(4), 0))


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 0.5]), True)
    opt = Adam([p], lr=1e-3)
    opt.step([np.array([0.3, -7.0, 1e-3])])
    np.testing.assert_allclose(p.data - np.array([1.0, -2.0, 0.5]), [-1e-3, 1e-3, -1e-3], rtol=1e-4)
    assert opt.state.step == 1


def test_adam_matches_reference_recursion():
    r = np.random.default_rng(0)
    p = Tensor(r.normal(size=4), True)
    ref = p.data.copy()
    m = v = np.zeros(4)
    opt = Adam([p], lr=0.01)
    for t in range(1, 6):
        g = r.normal(size=4)
        opt.step([g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_errors():
    p = Tensor(np.zeros(2), True)
    opt = Adam([p])
    with pytest.raises(ValueError, match="missing"):
        opt.step()
    with pytest.raises(ValueError, match="shape"):
        opt.step([np.zeros(3)])
