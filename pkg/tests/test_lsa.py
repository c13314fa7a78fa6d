import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lsakit.data import moon_splits
from lsakit.lsa import (CmRecord, ETA_CANDIDATES, ZeroReferenceError, batch_comparison_measure, comparison_measure,
                        detect_mvl, lsa_stats, run_lsa, tune_eta)
from lsakit.model import model_a, model_b
from lsakit.perturb import AttackSpec, NoiseSpec

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_cm_hand_value():
    # ||(3,4) - (0,0)|| / ||(3,4)|| = 1; ||(1,1)|| / ||(3,4)|| = sqrt(2)/5
    assert comparison_measure([3.0, 4.0], [0.0, 0.0]) == 1.0
    assert comparison_measure([3.0, 4.0], [2.0, 3.0]) == pytest.approx(np.sqrt(2) / 5, rel=1e-15)


def test_cm_zero_reference():
    assert comparison_measure(np.zeros(3), np.zeros(3)) == 0.0
    with pytest.raises(ZeroReferenceError):
        comparison_measure(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        comparison_measure(np.zeros(3), np.zeros(4))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       st.floats(1e-3, 1e3))
def test_cm_properties(a, b, scale):
    if np.linalg.norm(a) == 0:
        a = a + 1.0
    v = comparison_measure(a, b)
    assert v >= 0
    assert comparison_measure(a, a) == 0.0
    assert comparison_measure(scale * a, scale * b) == pytest.approx(v, rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 2, 3), elements=finite), arrays(np.float64, (5, 2, 3), elements=finite))
def test_batch_cm_matches_scalar(a, b):
    a[np.linalg.norm(a.reshape(5, -1), axis=1) == 0] = 1.0
    got = batch_comparison_measure(a, b)
    want = [comparison_measure(a[i], b[i]) for i in range(5)]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-300)


def test_stats_are_population_statistics():
    grid = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 7.0]])
    s = lsa_stats(grid, eta=0.5)
    assert s.mu == pytest.approx(3.0)
    assert s.sigma == pytest.approx(np.sqrt(((grid - 3.0) ** 2).sum() / 6))
    np.testing.assert_allclose(s.per_layer_mean, [2.0, 2.0, 5.0])
    assert s.M == 2


def test_stats_from_records_and_errors():
    recs = [CmRecord(s, l, float(s + l)) for s in (4, 9) for l in range(3)]
    s = lsa_stats(recs)
    np.testing.assert_allclose(s.per_layer_mean, [6.5, 7.5, 8.5])
    with pytest.raises(ValueError, match="incomplete"):
        lsa_stats(recs[:-1])
    with pytest.raises(ValueError, match="duplicate"):
        lsa_stats(recs + recs[:1])
    with pytest.raises(ValueError, match="ordinals"):
        lsa_stats([CmRecord(0, 1, 1.0)])


def brute_mvl(grid, eta):
    flat = [v for row in grid for v in row]
    mu = sum(flat) / len(flat)
    sigma = (sum((v - mu) ** 2 for v in flat) / len(flat)) ** 0.5
    means = [sum(row[l] for row in grid) / len(grid) for l in range(len(grid[0]))]
    hits = [l for l in range(len(means)) if means[l] - mu > eta * sigma]
    return sorted(hits, key=lambda l: (-means[l], l))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.sampled_from([0.0, 0.5, 1.0, 2.0]), st.integers(0, 2**31 - 1))
def test_detect_mvl_matches_brute_force(m, ly, eta, seed):
    grid = np.round(np.random.default_rng(seed).exponential(size=(m, ly)), 3)
    got = detect_mvl(lsa_stats(grid, eta)).layers
    want = brute_mvl(grid.tolist(), eta)
    # floating ties on the threshold are the only way the two could disagree
    if got != want:
        s = lsa_stats(grid, eta)
        diff = set(got) ^ set(want)
        assert all(abs(s.per_layer_mean[l] - s.mu - eta * s.sigma) < 1e-12 for l in diff)
        assert [l for l in got if l not in diff] == [l for l in want if l not in diff]
    else:
        assert got == want


def test_detect_mvl_order_and_ties():
    grid = np.array([[0.0, 5.0, 5.0, 9.0]])
    assert detect_mvl(lsa_stats(grid, 0.0)).layers == [3, 1, 2]
    assert detect_mvl(lsa_stats(np.ones((3, 3)), 0.0)).layers == []


def test_tune_eta():
    grid = np.array([[0.0, 0.0, 0.0, 10.0]] * 2)
    # one extreme layer: mean - mu = 7.5, sigma = 4.33 -> flagged at eta = 1.5 but not 2
    assert tune_eta(grid) == 1.5
    assert tune_eta(np.ones((2, 3))) == ETA_CANDIDATES[-1]


def test_run_lsa_moon():
    train, test = moon_splits(200, 300, 0.2, 0)
    m = model_a(0)
    rep = run_lsa(m, test, AttackSpec.pgd(0.3), M=64, eta=1.0, seed=2)
    assert rep.cm.shape == (64, 4)
    assert len(set(rep.sample_ids)) == 64
    assert np.all(rep.cm >= 0)
    again = run_lsa(m, test, AttackSpec.pgd(0.3), M=64, eta=1.0, seed=2)
    np.testing.assert_array_equal(rep.cm, again.cm)
    assert rep.cm_csv() == again.cm_csv()
    short = run_lsa(m, test, AttackSpec.pgd(0.3), M=64, eta="auto", seed=2, exclude_output=True)
    np.testing.assert_array_equal(short.cm, rep.cm[:, :3])
    assert len(short.mvl) >= 1
    assert rep.summary_csv().splitlines()[0] == "layer,mean_cm,mu,sigma,eta,flagged"
    assert len(rep.cm_csv().splitlines()) == 1 + 64 * 4


def test_run_lsa_noise_and_batches():
    _, test = moon_splits(10, 50, 0.2, 0)
    m = model_a(0)
    a = run_lsa(m, test, NoiseSpec("Gaussian", 0.1), M=20, seed=0, batch_size=7)
    assert a.cm.shape == (20, 4)
    assert a.label == "Gaussian(0.1)"


def test_run_lsa_errors():
    _, test = moon_splits(10, 20, 0.2, 0)
    m = model_a(0)
    with pytest.raises(ValueError):
        run_lsa(m, test, AttackSpec.pgd(0.3), M=0)
    with pytest.raises(ValueError, match="exceeds"):
        run_lsa(m, test, AttackSpec.pgd(0.3), M=21)
    with pytest.raises(ValueError):
        run_lsa(m, test, AttackSpec.pgd(0.3), M=5, eta="strict")


def test_lsa_model_b_shapes():
    from lsakit.data import Dataset
    r = np.random.default_rng(0)
    ds = Dataset(r.random((8, 1, 28, 28)), r.integers(0, 10, 8), "test", 10)
    rep = run_lsa(model_b(0), ds, AttackSpec("FGSM", 0.1, clamp=(0, 1)), M=8)
    assert rep.cm.shape == (8, 5)
