from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanfield_dr import kernels
from meanfield_dr.loadmodel import (OFF, ON, PoolState, build_nominal_pool_model, derivative_matrix,
                                    invariant_distribution, make_family, mean_sojourn, sample_next,
                                    tilt_transition)


# ---------------------------------------------------------------- PoolState

def test_pool_state_index_bijection():
    seen = {PoolState(k, i).index for k in (ON, OFF) for i in range(1, 49)}
    assert seen == set(range(96))
    for x in range(96):
        assert PoolState.from_index(x).index == x


@pytest.mark.parametrize("mode,soj", [(2, 1), (ON, 0), (OFF, 49)])
def test_pool_state_rejects_invalid(mode, soj):
    with pytest.raises(ValueError):
        PoolState(mode, soj)


# ---------------------------------------------------------------- nominal model

def test_small_model_uniform(small_pool):
    np.testing.assert_allclose(small_pool.pi0, 0.25, atol=1e-12)
    assert small_pool.ybar0 == pytest.approx(0.5, abs=1e-12)


def test_pool_model_equilibrium(pool):
    assert pool.d == 96
    assert pool.ybar0 == pytest.approx(0.5, abs=1e-12)
    assert mean_sojourn(pool, ON) == pytest.approx(24.0, rel=1e-10)
    assert mean_sojourn(pool, OFF) == pytest.approx(24.0, rel=1e-10)
    assert np.abs(pool.pi0 @ pool.P0 - pool.pi0).max() < 1e-12


def test_pool_model_structure(pool):
    P = pool.P0
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    for x in range(pool.d):
        s = PoolState.from_index(x)
        stay = PoolState(s.mode, min(s.sojourn + 1, 48)).index
        switch = PoolState(1 - s.mode, 1).index
        assert P[x, switch] == pytest.approx(1 / 24)
        assert P[x, stay] == pytest.approx(23 / 24)
        assert np.count_nonzero(P[x]) == 2


def test_pi0_matches_eigenvector(pool):
    # independent oracle: left eigenvector for eigenvalue 1
    w, V = np.linalg.eig(pool.P0.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1))])
    v /= v.sum()
    np.testing.assert_allclose(pool.pi0, v, atol=1e-12)
    assert pool.pi0[:48].sum() == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("I_max,p", [(1, 0.5), (48, 0.0), (48, 1.0), (48, -0.1)])
def test_pool_model_rejects_bad_params(I_max, p):
    with pytest.raises(ValueError):
        build_nominal_pool_model(I_max, p)


# ---------------------------------------------------------------- tilt

def test_tilt_zero_is_exact_copy(pool):
    P = tilt_transition(pool, 0.0)
    assert np.array_equal(P, pool.P0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_tilt_stays_stochastic_and_sparse(zeta):
    fam = build_nominal_pool_model()
    P = tilt_transition(fam, zeta)
    assert np.all(np.isfinite(P))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P[fam.P0 == 0] == 0)
    assert np.all((P >= 0) & (P <= 1))


def test_tilt_large_zeta_finite(pool):
    for z in (-1e3, 1e3):
        P = tilt_transition(pool, z)
        assert np.all(np.isfinite(P))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_tilt_rejects_nonfinite(pool):
    with pytest.raises(ValueError):
        tilt_transition(pool, np.inf)


def test_tilt_monotone_on_mass(pool, rand5):
    for fam in (pool, rand5):
        on = fam.U > 0
        m0 = fam.P0[:, on].sum(axis=1)
        m1 = tilt_transition(fam, 1.0)[:, on].sum(axis=1)
        assert np.all(m1 >= m0 - 1e-15)


def test_tilt_finite_difference_small_model(small_pool):
    fd = (tilt_transition(small_pool, 0.1) - small_pool.P0) / 0.1
    assert np.abs(fd - small_pool.E).max() < 0.1


# ---------------------------------------------------------------- derivative

def test_derivative_identity_chain_is_zero():
    # P0 = I is reducible, so build the minimal object derivative_matrix reads
    fam = SimpleNamespace(P0=np.eye(3), U=np.array([1.0, 0.0, 0.0]))
    assert np.array_equal(derivative_matrix(fam), np.zeros((3, 3)))


def test_derivative_two_state_by_hand():
    fam = make_family(np.full((2, 2), 0.5), np.array([1.0, 0.0]))
    np.testing.assert_allclose(derivative_matrix(fam), [[0.25, -0.25], [0.25, -0.25]], atol=1e-15)


def test_derivative_matches_central_difference(pool):
    h = 1e-4
    fd = (tilt_transition(pool, h) - tilt_transition(pool, -h)) / (2 * h)
    assert np.abs(fd - derivative_matrix(pool)).max() < 1e-6
    assert np.abs(pool.E.sum(axis=1)).max() < 1e-10


def test_derivative_second_order_accuracy(pool):
    errs = []
    for h in (1e-2, 5e-3):
        fd = (tilt_transition(pool, h) - tilt_transition(pool, -h)) / (2 * h)
        errs.append(np.abs(fd - pool.E).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


# ---------------------------------------------------------------- invariant law

def test_invariant_doubly_stochastic():
    P = np.array([[0.2, 0.5, 0.3], [0.5, 0.2, 0.3], [0.3, 0.3, 0.4]])
    np.testing.assert_allclose(invariant_distribution(P), 1 / 3, atol=1e-12)


def test_invariant_two_state_by_hand():
    np.testing.assert_allclose(invariant_distribution(np.array([[0.9, 0.1], [0.5, 0.5]])), [5 / 6, 1 / 6],
                               atol=1e-12)


def test_invariant_rejects_reducible():
    P = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="recurrent classes"):
        invariant_distribution(P)


def test_invariant_reports_periodic():
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="periodic"):
        invariant_distribution(P, max_iter=1000)


# ---------------------------------------------------------------- sampling

def test_sample_next_one_hot():
    row = np.zeros(96)
    row[7] = 1.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_next(PoolState(ON, 1), row, rng) == PoolState.from_index(7)


def test_sample_next_binomial():
    row = np.array([0.5, 0.5])
    rng = np.random.default_rng(1)
    n = 1_000_000
    hits = sum(sample_next(0, row, rng) for _ in range(n))
    assert abs(hits / n - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_sample_next_deterministic_stream(pool):
    def run():
        s = kernels.CounterStream(42, index=3)
        x, out = 0, []
        for _ in range(200):
            x = sample_next(x, pool.P0[x], s)
            out.append(x)
        return out
    assert run() == run()


def test_sample_next_frequencies_chi_square(pool):
    from scipy import stats
    row = tilt_transition(pool, 0.7)[5]
    rng = np.random.default_rng(3)
    n = 200_000
    draws = np.array([sample_next(5, row, rng) for _ in range(n)])
    support = np.flatnonzero(row)
    obs = np.array([(draws == s).sum() for s in support])
    assert obs.sum() == n
    p = stats.chisquare(obs, n * row[support]).pvalue
    assert p > 1e-3
