import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanfield_dr.loadmodel import OFF, ON, PoolState
from meanfield_dr.qos import (PooledHistogram, QoSAccumulator, QoSBounds, discounted_reference,
                              discounted_reference_series, discounted_sum, ell_ontime, ell_signed,
                              ell_vector, half_life, histogram_counts, moving_window_qos,
                              predict_mean_qos, read_histogram_csv, update_discounted,
                              write_histogram_csv)

BETA = 0.9975


def test_ell_signed():
    assert ell_signed(PoolState(ON, 7)) == 1.0
    assert ell_signed(PoolState(OFF, 1)) == -1.0


def test_ell_signed_zero_mean_under_pi0(pool):
    assert pool.pi0 @ ell_vector(pool.U, "signed") == pytest.approx(0.0, abs=1e-12)


def test_ell_ontime():
    assert ell_ontime(PoolState(ON, 3), 0.5) == 0.5
    assert ell_ontime(PoolState(OFF, 9), 0.5) == 0.0
    assert sum(ell_ontime(PoolState(ON, 1), 0.5) for _ in range(314)) == pytest.approx(157.0)
    with pytest.raises(ValueError):
        ell_ontime(PoolState(ON, 1), 0.0)


def test_update_discounted_geometric():
    acc = QoSAccumulator(0.0, BETA)
    for _ in range(401):
        acc = update_discounted(acc, 1.0)
    assert acc.value == pytest.approx((1 - BETA ** 401) / (1 - BETA), rel=1e-12)
    assert acc.value == pytest.approx(253.3, abs=0.15)  # quoted to one decimal


def test_alternating_sequence_bounded():
    L = discounted_sum(np.tile([1.0, -1.0], 5000), BETA)
    assert np.abs(L).max() <= 1.0 + 1e-12


def test_half_life():
    assert half_life(BETA) == pytest.approx(np.log(0.5) / np.log(BETA))
    assert round(half_life(BETA)) == 277


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_recursion_equals_closed_form(seed):
    ell = np.random.default_rng(seed).choice([-1.0, 1.0], size=10_000)
    L = discounted_sum(ell, BETA)
    n = np.arange(ell.size)
    for tau in (0, 17, 4000, 9999):
        direct = np.sum(BETA ** (tau - n[:tau + 1]) * ell[:tau + 1])
        assert L[tau] == pytest.approx(direct, abs=1e-10)
    assert np.abs(L).max() <= 1 / (1 - BETA)


def test_moving_window():
    assert moving_window_qos(np.full(400, 0.5), 314) == pytest.approx(157.5)
    assert moving_window_qos([0.0, 0.5, 0.0, 0.5], 0) == 0.5
    with pytest.raises(ValueError):
        moving_window_qos(np.ones(10), 314)


def test_discounted_reference_examples():
    assert discounted_reference(np.zeros(100), BETA, 6, 50) == 0.0
    c, m, tau = 0.3, 6, 40
    r = np.full(m * tau + 1, c)
    assert discounted_reference(r, BETA, m, m * tau) == pytest.approx(c * (1 - BETA ** (tau + 1)) / (1 - BETA))
    with pytest.raises(IndexError):
        discounted_reference(r, BETA, m, r.size)


@pytest.mark.parametrize("m", [1, 6])
def test_discounted_reference_series_matches_direct(m):
    r = np.random.default_rng(m).normal(size=3000)
    R = discounted_reference_series(r, BETA, m)
    for t in (0, 5, 1234, 2999):
        assert R[t] == pytest.approx(discounted_reference(r, BETA, m, t), abs=1e-12)


def test_predict_mean_qos_zero_reference():
    assert np.array_equal(predict_mean_qos(np.zeros(500), BETA, 6), np.zeros(500))


def test_class_averaging_identity():
    # Perfect tracking: every class-k update at t = k (mod m) adds ell whose
    # class mean is 2 (ybar0 + r_t) - 1 = 2 r_t.  The population mean of the
    # held per-class discounted sums then equals (2/m) sum_j R_{t-j}^beta.
    m, T = 6, 3000
    r = 0.1 * np.sin(np.arange(T) / 50.0)
    L = np.zeros(m)
    Lbar = np.empty(T)
    for t in range(T):
        k = t % m
        L[k] = BETA * L[k] + 2.0 * r[t]
        Lbar[t] = L.mean()
    R = discounted_reference_series(r, BETA, m)
    pred = np.array([2.0 / m * R[max(0, t - m + 1):t + 1].sum() for t in range(T)])
    np.testing.assert_allclose(Lbar, pred, atol=1e-12)
    # for a slowly varying reference this is 2 R_t up to O(m * dr/dt)
    assert np.abs(Lbar - predict_mean_qos(r, BETA, m)).max() < 0.05 * np.abs(Lbar).max()


def test_bounds_validation():
    QoSBounds(-20, 20).validate(BETA)
    for lo, hi in [(1, 20), (-20, -1), (-500, 20), (-0.5, 0.5)]:
        with pytest.raises(ValueError):
            QoSBounds(lo, hi).validate(BETA)
    with pytest.raises(ValueError):
        QoSAccumulator(0.0, 1.0)


def test_histogram_csv_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(0, 10, 5000)
    edges, counts = histogram_counts(v, width=1.0)
    assert counts.sum() == v.size
    np.testing.assert_allclose(np.diff(edges), 1.0)
    path = tmp_path / "h.csv"
    write_histogram_csv(path, edges, counts)
    assert path.read_text().splitlines()[0] == "bin_left,bin_right,count"
    e2, c2 = read_histogram_csv(path)
    np.testing.assert_allclose(e2, edges)
    assert np.array_equal(c2, counts)


def test_pooled_histogram_moments():
    h = PooledHistogram(-400, 400, 1.0)
    rng = np.random.default_rng(2)
    chunks = [rng.normal(3, 7, 1000) for _ in range(5)]
    for c in chunks:
        h.add(c)
    allv = np.concatenate(chunks)
    assert h.n == allv.size and h.counts.sum() == allv.size
    assert h.mean == pytest.approx(allv.mean())
    assert h.std == pytest.approx(allv.std())
    edges, counts = h.trimmed()
    assert counts[0] > 0 and counts[-1] > 0
