import math
import warnings

import numpy as np
import pytest

from mixlab import _kernels, data_io, id_estimation as ide
from mixlab.errors import DegenerateSampleError, DuplicatePointError


def test_colinear_hand_example():
    s = ide.nn_two(np.array([[0.0], [1.0], [3.0]]))
    np.testing.assert_array_equal(s.r1, [1, 1, 2])
    np.testing.assert_array_equal(s.r2, [3, 2, 3])
    np.testing.assert_array_equal(s.mu, [3, 2, 1.5])


@pytest.mark.parametrize("method", ["brute", "kdtree", "auto"])
def test_duplicate_point_named(method):
    with pytest.raises(DuplicatePointError) as e:
        ide.nn_two(np.array([[0.0], [0.0], [1.0]]), method)
    assert e.value.indices == (0, 1)


def test_lattice_ties_identical_across_methods():
    g = np.stack(np.meshgrid(np.arange(12.0), np.arange(9.0)), -1).reshape(-1, 2)
    a, b = ide.nn_two(g, "brute"), ide.nn_two(g, "kdtree")
    np.testing.assert_array_equal(a.r1, b.r1)
    np.testing.assert_array_equal(a.r2, b.r2)
    with pytest.raises(DegenerateSampleError):
        ide.twonn_mle(a)


def test_too_few_points():
    with pytest.raises(ValueError):
        ide.nn_two(np.zeros((2, 3)))


@pytest.mark.parametrize("d", [1, 3, 7])
def test_kdtree_equals_brute(d, rng):
    x = rng.random((600, d))
    a, b = ide.nn_two(x, "brute"), ide.nn_two(x, "kdtree")
    np.testing.assert_array_equal(a.r1, b.r1)
    np.testing.assert_array_equal(a.r2, b.r2)


def test_brute_matches_naive_oracle(rng):
    x = rng.normal(size=(80, 4))
    s = ide.nn_two(x)
    dist = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    srt = np.sort(dist, axis=1)
    np.testing.assert_allclose(s.r1, srt[:, 0], rtol=1e-14)
    np.testing.assert_allclose(s.r2, srt[:, 1], rtol=1e-14)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable or disabled")
def test_kernel_paths_identical(rng):
    x = rng.random((300, 5))
    for u, v in zip(_kernels.two_nn(x, use_numba=True), _kernels.two_nn(x, use_numba=False)):
        np.testing.assert_array_equal(u, v)


def test_mle_exact_examples():
    e = math.e
    s = ide.TwoNNSample(np.ones(3), np.full(3, e))
    assert ide.twonn_mle(s).d_hat == pytest.approx(1.0, abs=1e-15)
    s = ide.TwoNNSample(np.ones(10), np.full(10, math.exp(0.5)))
    assert ide.twonn_mle(s).d_hat == pytest.approx(2.0, abs=1e-14)


def test_mle_drops_ties():
    s = ide.TwoNNSample(np.ones(4), np.array([1.0, math.e, math.e, 1.0]))
    est = ide.twonn_mle(s)
    assert est.dropped_ties == 2 and est.n_used == 2 and est.d_hat == pytest.approx(1.0)
    with pytest.raises(DegenerateSampleError):
        ide.twonn_mle(ide.TwoNNSample(np.ones(3), np.ones(3)))


def test_fit_on_exact_pareto():
    # mu ~ Pareto(d): log mu ~ Exponential(rate d)
    rng = np.random.default_rng(0)
    log_mu = rng.exponential(1 / 3.0, size=10_000)
    s = ide.TwoNNSample(np.ones_like(log_mu), np.exp(log_mu))
    assert 2.9 <= ide.twonn_fit(s, 0.0).d_hat <= 3.1
    assert 2.9 <= ide.twonn_mle(s).d_hat <= 3.1


def test_fit_preconditions():
    s = ide.TwoNNSample(np.ones(50), np.linspace(1.1, 3, 50))
    with pytest.raises(ValueError):
        ide.twonn_fit(s, 0.5)
    with pytest.raises(DegenerateSampleError):
        ide.twonn_fit(ide.TwoNNSample(np.ones(8), np.linspace(1.1, 3, 8)), 0.1)


def test_fit_and_mle_agree_on_hypercube():
    s = ide.nn_two(data_io.gen_hypercube(4000, 3, 6, seed=2))
    a, b = ide.twonn_mle(s).d_hat, ide.twonn_fit(s).d_hat
    assert abs(a - b) / a < 0.15


def test_hypercube_d2_ambient10():
    est = ide.twonn_mle(ide.nn_two(data_io.gen_hypercube(8192, 2, 10, seed=1)))
    assert 1.85 <= est.d_hat <= 2.15


def test_bootstrap():
    pc = data_io.gen_hypercube(1500, 2, 3, seed=0)
    a = ide.bootstrap_id(pc, 50, seed=9)
    b = ide.bootstrap_id(pc, 50, seed=9)
    assert a.ci == b.ci
    assert a.ci[0] <= a.d_hat <= a.ci[1]
    wide = ide.bootstrap_id(pc, 50, seed=9, rescale=True)
    assert wide.d_hat == a.d_hat
    assert wide.ci[0] <= a.ci[0] and wide.ci[1] >= a.ci[1]
    assert wide.ci[0] <= 2.0 <= wide.ci[1]
    with pytest.raises(ValueError):
        ide.bootstrap_id(pc, 1, seed=0)


def test_representation_id_matches_direct_path():
    pts = data_io.gen_hypercube(1000, 2, 5, seed=4).points
    assert ide.representation_id(pts).d_hat == ide.twonn_mle(ide.nn_two(pts)).d_hat


def test_representation_id_warnings():
    rng = np.random.default_rng(0)
    rows = rng.random((50, 4))
    rows = np.vstack([rows, rows[:3]])
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        est = ide.representation_id(rows)
    assert est.dropped_duplicates == 3
    assert any("N < 100" in w for w in est.warnings)
    with pytest.raises(DegenerateSampleError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ide.representation_id(np.ones((200, 3)))


def test_estimate_json_fields():
    est = ide.representation_id(data_io.gen_hypercube(300, 2, 2, seed=0).points, n_resamples=20)
    import json
    d = json.loads(est.to_json())
    assert {"d_hat", "n_used", "method", "ci", "dropped_duplicates"} <= set(d)
    assert len(d["ci"]) == 2


def test_monotone_in_dimension():
    est = [ide.twonn_mle(ide.nn_two(data_io.gen_hypercube(4096, d, 10, seed=0))).d_hat for d in (1, 2, 5, 10)]
    assert all(a < b for a, b in zip(est, est[1:]))
