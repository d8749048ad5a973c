import numpy as np
import pytest

import oracles
from mixlab import metrics as mt, model as M
from mixlab.errors import ShapeError


def _table(n=200, k=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, k)) * 3, rng.integers(0, k, size=n)


def test_affinity_examples():
    x, y = _table()
    assert mt.affinity(x, x, y).value == 0.0
    # 93 of 100 right clean, 80 right after augmentation
    y = np.zeros(100, int)
    clean = np.zeros((100, 2))
    clean[:93, 0] = 1
    clean[93:, 1] = 1
    aug = np.zeros((100, 2))
    aug[:80, 0] = 1
    aug[80:, 1] = 1
    assert mt.affinity(clean, aug, y).value == pytest.approx(-13.0, abs=1e-12)
    with pytest.raises(ShapeError):
        mt.affinity(clean, aug[:5], y)


def test_affinity_oracle():
    a, y = _table(seed=1)
    b, _ = _table(seed=2)
    assert abs(mt.affinity(a, b, y).value - oracles.affinity(a, b, y)) <= 1e-12


def test_diversity_examples():
    y = np.arange(20) % 10
    assert mt.diversity(np.zeros((20, 10)), y).value == pytest.approx(np.log(10), abs=1e-12)
    # margin 20 gives log(1 + (K-1) e^-20), below 1e-8 for two classes
    y2 = np.arange(20) % 2
    assert mt.diversity(M.one_hot(y2, 2) * 20.0, y2).value < 1e-8
    x, y = _table()
    assert mt.diversity(x, y).value == np.mean(M.soft_target_ce(x, M.one_hot(y, 10)))


def test_diversity_oracle_and_shift_invariance():
    x, y = _table(seed=3)
    assert abs(mt.diversity(x, y).value - oracles.diversity(x, y)) <= 1e-12
    shift = np.random.default_rng(0).normal(size=(200, 1)) * 50
    assert mt.diversity(x + shift, y).value == pytest.approx(mt.diversity(x, y).value, abs=1e-10)


def test_mix_diversity():
    x, y1 = _table(seed=4)
    _, y2 = _table(seed=5)
    lam = np.random.default_rng(6).random(200)
    assert abs(mt.mix_diversity(x, y1, y2, lam).value - oracles.mix_diversity(x, y1, y2, lam)) <= 1e-12
    assert mt.mix_diversity(x, y1, y2, np.ones(200)).value == pytest.approx(mt.diversity(x, y1).value, abs=1e-14)
    assert mt.mix_diversity(x, y1, y1, np.full(200, 0.5)).value == pytest.approx(mt.diversity(x, y1).value,
                                                                                abs=1e-14)
    with pytest.raises(ValueError):
        mt.mix_diversity(x, y1, y2, np.full(200, 1.5))


def test_class_increase_examples():
    inc = mt.class_increase([0, 0], [5, 9], 100)
    np.testing.assert_array_equal(inc.increase, [5, 9])
    assert inc.c_max == 1
    inc = mt.class_increase([3, 3, 3], [3, 3, 3], 10)
    assert inc.c_max == 0 and mt.di_index(inc).value == 0.0
    with pytest.raises(ShapeError):
        mt.class_increase([1, 2], [1, 2, 3], 10)


def test_class_increase_sum_identity():
    a, y = _table(seed=7)
    b, _ = _table(seed=8)
    w0 = M.wrong_counts(np.argmax(a, 1), y, 10)
    w1 = M.wrong_counts(np.argmax(b, 1), y, 10)
    inc = mt.class_increase(w0, w1, 200)
    assert inc.increase.sum() == w1.sum() - w0.sum()


def test_di_index_examples():
    assert mt.di_index(mt.ClassIncrease(np.array([9, 2, -4]), 100)).value == 9.0
    assert mt.di_index(mt.ClassIncrease(np.array([-1, -2]), 100)).value == 0.0
    with pytest.raises(ValueError):
        mt.di_index(mt.ClassIncrease(np.array([1]), 0))


def test_di_oracle():
    a, y = _table(seed=9)
    b, _ = _table(seed=10)
    expect, _ = oracles.di(a, b, y, 10)
    w0 = M.wrong_counts(np.argmax(a, 1), y, 10)
    w1 = M.wrong_counts(np.argmax(b, 1), y, 10)
    assert abs(mt.di_index(mt.class_increase(w0, w1, 200)).value - expect) <= 1e-12


def test_worst_case_examples():
    runs = [mt.ClassIncrease(np.array([0, v]), 100) for v in (3, 7, 5)]
    rep = mt.worst_case_di(runs)
    assert rep.value == 7.0 and rep.n_runs == 3 and rep.per_run == [3.0, 7.0, 5.0]
    assert mt.worst_case_di(runs[:1]).value == mt.di_index(runs[0]).value
    # per-class maxima are taken before choosing the worst class
    split = [mt.ClassIncrease(np.array([4, -3]), 10), mt.ClassIncrease(np.array([-3, 4]), 10)]
    assert mt.worst_case_di(split).value == 40.0
    with pytest.raises(ValueError):
        mt.worst_case_di([])
    with pytest.raises(ShapeError):
        mt.worst_case_di([mt.ClassIncrease(np.array([1]), 10), mt.ClassIncrease(np.array([1, 2]), 10)])


def test_worst_case_at_least_every_run():
    rng = np.random.default_rng(0)
    for _ in range(50):
        runs = [mt.ClassIncrease(rng.integers(-5, 10, size=6), 50) for _ in range(4)]
        w = mt.worst_case_di(runs).value
        assert all(w >= mt.di_index(r).value for r in runs)
        assert 0 <= w <= 100


def test_report_csv_grouping():
    reps = [mt.MetricReport("affinity", v, "pp", seed=1, config_hash="abc") for v in (-1.0, 2.0, 3.5)]
    text = mt.reports_to_csv(reps)
    lines = text.splitlines()
    assert lines[0] == "metric,value,units,n_runs,seed,config_hash"
    assert len(lines) == 4 and "" not in lines
    mixed = mt.reports_to_csv(reps + [mt.MetricReport("diversity", 1.0, "nats")])
    assert mixed.splitlines()[4] == ""
    assert mt.reports_to_csv([]) == "metric,value,units,n_runs,seed,config_hash\n"


def test_report_validation():
    with pytest.raises(ValueError):
        mt.MetricReport("x", float("nan"), "pp")
    with pytest.raises(ValueError):
        mt.MetricReport("x", 1.0, "pp", n_runs=2, per_run=[1.0])
