import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhc.core import ClassWeights
from dhc.weighting import (DICE_MIN, ema_blend, DiffDWState, DistDWState, WeightsCSV, WeightTracker,
                           diffdw_record, diffdw_weights, distdw_raw_weights, distdw_update,
                           uniform_weights)

counts_strategy = st.lists(st.integers(0, 10 ** 6), min_size=2, max_size=8)


def test_distdw_exact_log_ratio():
    assert list(distdw_raw_weights([1000, 100, 10])) == [0.0, 0.5, 1.0]


def test_distdw_equal_counts():
    assert list(distdw_raw_weights([50, 50, 50])) == [1.0, 1.0, 1.0]


def test_distdw_zero_count_clamp():
    # ln(900/N) / ln 900 with N clamped to 1
    np.testing.assert_allclose(distdw_raw_weights([900, 90, 9, 0]).values,
                               [0.0, 0.33849624626442276, 0.6769924925288455, 1.0], rtol=1e-12)


def test_distdw_rejects_single_class():
    with pytest.raises(ValueError):
        distdw_raw_weights([5])


@settings(max_examples=200, deadline=None)
@given(counts_strategy)
def test_distdw_range(counts):
    w = distdw_raw_weights(counts).values
    assert np.all((w >= 0) & (w <= 1))
    n = np.maximum(counts, 1)
    if n.min() != n.max():
        assert w.max() == 1.0
        assert np.all(w[n == n.max()] == 0.0)


@settings(max_examples=200, deadline=None)
@given(counts_strategy, st.sampled_from([2.0, 10.0]))
def test_distdw_base_invariance(counts, base):
    n = np.maximum(np.asarray(counts, float), 1)
    logp = np.log(n.max() / n) / math.log(base)
    expected = np.ones_like(n) if logp.max() == 0 else logp / logp.max()
    np.testing.assert_allclose(distdw_raw_weights(counts).values, expected, rtol=1e-12, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(counts_strategy, st.data())
def test_distdw_monotone(counts, data):
    counts = [max(c, 1) for c in counts]
    k = data.draw(st.integers(0, len(counts) - 1))
    bigger = list(counts)
    bigger[k] += data.draw(st.integers(0, 10 ** 6))
    assert distdw_raw_weights(counts).values[k] >= distdw_raw_weights(bigger).values[k] - 1e-15


def test_distdw_update_first_call_adopts_raw():
    s = DistDWState(3)
    assert not s.initialized
    assert list(distdw_update(s, [1000, 100, 10])) == [0.0, 0.5, 1.0]
    assert s.initialized


def test_ema_blend_step():
    out = ema_blend(ClassWeights([1, 1, 1]), ClassWeights([0, 0, 0]), 0.99)
    np.testing.assert_allclose(out.values, [0.99] * 3)


def test_distdw_fixed_point():
    s = DistDWState(3, weights=distdw_raw_weights([1000, 100, 10]))
    np.testing.assert_allclose(distdw_update(s, [1000, 100, 10]).values, [0, 0.5, 1])


def test_distdw_ema_from_ones_toward_raw():
    s = DistDWState(3, beta=0.99, weights=ClassWeights([1, 1, 1]))
    np.testing.assert_allclose(distdw_update(s, [1000, 100, 10]).values, [0.99, 0.995, 1.0])


@settings(max_examples=50, deadline=None)
@given(counts_strategy, st.lists(st.floats(0, 1), min_size=8, max_size=8), st.floats(0.5, 0.999))
def test_ema_contraction(counts, start, beta):
    raw = distdw_raw_weights(counts)
    K = len(raw)
    s = DistDWState(K, beta=beta, weights=ClassWeights(start[:K]))
    d0 = np.abs(s.weights.values - raw.values).max()
    for n in range(1, 30):
        distdw_update(s, counts)
        assert np.abs(s.weights.values - raw.values).max() <= beta ** n * d0 + 1e-12
    assert np.all((s.weights.values >= 0) & (s.weights.values <= 1))


def test_distdw_rejects_bad_beta():
    with pytest.raises(ValueError):
        DistDWState(3, beta=1.0)


def test_diffdw_fresh_is_ones():
    assert list(diffdw_weights(DiffDWState(4))) == [1.0] * 4


def test_diffdw_record_absent_noop():
    s = DiffDWState(3, tau=5)
    diffdw_record(s, [0.5, 0.5, 0.5], [False] * 3)
    assert all(len(h) == 0 for h in s.history)


def test_diffdw_ring_buffer():
    s = DiffDWState(1, tau=3)
    vals = [0.1, 0.2, 0.3, 0.4, 0.5]
    for v in vals:
        diffdw_record(s, [v], [True])
    assert list(s.history[0]) == vals[-4:]
    assert s.records_seen[0] == 5


def test_diffdw_clamp():
    s = DiffDWState(1)
    diffdw_record(s, [0.0], [True])
    assert s.history[0][0] == DICE_MIN == 1e-3


def test_diffdw_length_mismatch():
    with pytest.raises(ValueError):
        diffdw_record(DiffDWState(3), [0.5, 0.5], [True, True])


def test_diffdw_neutral():
    s = DiffDWState(2, tau=2)
    for _ in range(3):
        diffdw_record(s, [0.5, 0.5], [True, False])
    # class 1 has no history -> max raw -> equal to class 0 after normalisation
    np.testing.assert_allclose(diffdw_weights(s).values, [1.0, 1.0])
    s1 = DiffDWState(1, tau=2)
    for _ in range(3):
        diffdw_record(s1, [0.5], [True])
    # raw = mean(1 - lambda) * 1**alpha = 0.5, normalised by itself
    assert diffdw_weights(s1).values[0] == pytest.approx(1.0)


def worked_example_state():
    s = DiffDWState(2, tau=2)
    for a, b in zip([0.2, 0.4, 0.8], [0.5, 0.4, 0.3]):
        diffdw_record(s, [a, b], [True, True])
    return s


def test_diffdw_worked_example():
    # raw_A = 0.4 * (1e-8 / (2 ln 2 + 1e-8))**0.2 = 9.41215e-3
    # raw_B = 0.65 * ((ln(5/4) + ln(4/3) + 1e-8) / 1e-8)**0.2 = 22.6239
    w = diffdw_weights(worked_example_state()).values
    assert w[1] == 1.0
    assert w[0] == pytest.approx(9.412151289836072e-3 / 22.623921912961272, rel=1e-9)
    assert float(f"{w[0]:.2g}") == 4.2e-4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=0, max_size=60), st.integers(1, 10))
def test_diffdw_positive_finite(hist, tau):
    s = DiffDWState(2, tau=tau)
    for v in hist:
        diffdw_record(s, [v, 1.0 - v], [True, True])
    w = diffdw_weights(s).values
    assert np.all(np.isfinite(w)) and np.all(w > 0) and w.max() == pytest.approx(1.0)


def test_diffdw_ordering_equal_reversed_dice():
    s = DiffDWState(2, tau=3)
    up = [0.3, 0.4, 0.5, 0.6]
    down = [0.7] + up[1:][::-1]  # same 1 - lambda mean over the last tau records
    for a, b in zip(up, down):
        diffdw_record(s, [a, b], [True, True])
    w = diffdw_weights(s).values
    assert w[0] < w[1]


def test_uniform():
    assert list(uniform_weights(2)) == [1.0, 1.0]
    assert list(uniform_weights(14)) == [1.0] * 14
    assert list(uniform_weights(5)) == list(uniform_weights(5))
    with pytest.raises(ValueError):
        uniform_weights(1)


def test_tracker_dispatch():
    t = WeightTracker("distdw", 3)
    assert list(t.weights()) == [1.0] * 3
    t.update(pseudo_counts=[1000, 100, 10], dice=[0.5] * 3, present=[True] * 3)
    assert list(t.weights()) == [0.0, 0.5, 1.0]
    d = WeightTracker("diffdw", 2, tau=2)
    d.update(pseudo_counts=[10, 1], dice=[0.5, 0.5], present=[True, True])
    assert list(d.weights()) == [1.0, 1.0]
    with pytest.raises(ValueError):
        WeightTracker("focal", 2)


def test_weights_csv(tmp_path):
    out = WeightsCSV(tmp_path / "weights.csv", 3)
    out.append(0, "distdw", distdw_raw_weights([900, 90, 9]))
    out.append(1, "uniform", uniform_weights(3))
    rows = list(csv.reader(open(tmp_path / "weights.csv")))
    assert rows[0] == ["iteration", "strategy", "w_0", "w_1", "w_2"]
    assert rows[1] == ["0", "distdw", "0", "0.5", "1"]
    assert rows[2] == ["1", "uniform", "1", "1", "1"]
