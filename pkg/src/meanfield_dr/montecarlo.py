"""Simulation oracles for the routing-noise covariance and the modulated-disturbance spectrum.

Both oracles run many independent stationary copies of one load's chain
through :func:`kernels.simulate_chains`, so they share the numba/numpy
switch and the counter-based random streams of the population engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import kernels
from .spectral import CrossSpectrumAccumulator, sigma_delta


def stationary_chains(P, pi0, n_chains: int, n_steps: int, seed: int = 0):
    """``(n_chains, n_steps + 1)`` state trajectories started from ``pi0``."""
    P = np.asarray(P, dtype=float)
    succ, _ = kernels.successor_table(P)
    cum = kernels.cumulative_rows(P, succ)
    keys = kernels.stream_keys(seed, n_chains)
    u = kernels.counter_uniform(keys, 1 << 62)
    x0 = np.minimum(np.searchsorted(np.cumsum(pi0), u, side="right"), P.shape[0] - 1)
    return kernels.simulate_chains(x0, keys, n_steps, succ, cum)


def transition_counts(path, d: int) -> np.ndarray:
    """Matrix ``C[x, x']`` counting the transitions along one trajectory."""
    pairs = path[:-1] * d + path[1:]
    return np.bincount(pairs, minlength=d * d).reshape(d, d).astype(float)


def delta_second_moment(C, P0) -> np.ndarray:
    """``sum_t Delta_t^T Delta_t`` from transition counts, ``Delta = e_{X'} - P0[X]``."""
    n = C.sum(axis=1)
    return np.diag(C.sum(axis=0)) - C.T @ P0 - P0.T @ C + P0.T @ (n[:, None] * P0)


@dataclass
class CovarianceCheck:
    analytic: np.ndarray
    estimate: np.ndarray
    std_error: np.ndarray
    n_steps: int

    @property
    def z_scores(self) -> np.ndarray:
        dev = self.estimate - self.analytic
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.std_error > 0, dev / self.std_error, np.where(np.abs(dev) > 1e-12, np.inf, 0.0))
        return z

    @property
    def max_abs_z(self) -> float:
        return float(np.abs(self.z_scores).max())

    def passed(self, k: float = 3.0) -> bool:
        return self.max_abs_z <= k


def sigma_delta_oracle(P0, pi0, n_total: int = 1_000_000, n_chains: int = 100, seed: int = 0) -> CovarianceCheck:
    """Monte-Carlo covariance of the routing noise against the closed form.

    ``n_total`` stationary transitions are split over ``n_chains``
    independent chains; the standard error of each entry is the spread of the
    per-chain estimates over ``sqrt(n_chains)``.
    """
    P0 = np.asarray(P0, dtype=float)
    d = P0.shape[0]
    n_steps = n_total // n_chains
    paths = stationary_chains(P0, pi0, n_chains, n_steps, seed)
    per_chain = np.empty((n_chains, d, d))
    for c in range(n_chains):
        per_chain[c] = delta_second_moment(transition_counts(paths[c], d), P0) / n_steps
    est = per_chain.mean(axis=0)
    se = per_chain.std(axis=0, ddof=1) / np.sqrt(n_chains)
    return CovarianceCheck(sigma_delta(P0, pi0), est, se, n_steps * n_chains)


def ar1_process(n: int, rho: float, var: float, rng) -> np.ndarray:
    """Stationary AR(1) with lag-one correlation ``rho`` and variance ``var``."""
    w = rng.normal(0.0, np.sqrt(var * (1.0 - rho ** 2)), n)
    x0 = rng.normal(0.0, np.sqrt(var))
    return signal.lfilter([1.0], [1.0, -rho], w, zi=[rho * x0])[0]


def modulated_disturbance_psd(family, poles, weights, m: int, n_chains: int = 256, n_steps: int = 16384,
                              segment_length: int = 64, seed: int = 0, batch: int = 8):
    """Welch cross-spectral matrix of ``zeta_{m tau} E[X_tau, :]``.

    ``zeta`` is a grid-rate sum of independent AR(1) processes (poles
    ``poles``, variances ``weights``), drawn independently of the chains and
    sub-sampled every ``m`` grid steps.  Returns ``(theta, S_hat)`` on the
    one-sided grid.
    """
    rng = np.random.default_rng(seed)
    E = family.E
    acc = CrossSpectrumAccumulator(segment_length, family.d)
    for b0 in range(0, n_chains, batch):
        nb = min(batch, n_chains - b0)
        paths = stationary_chains(family.P0, family.pi0, nb, n_steps - 1, seed=seed * 1_000_003 + b0)
        zeta = np.zeros((nb, n_steps))
        for rho, A in zip(poles, weights):
            for c in range(nb):
                zeta[c] += ar1_process(n_steps * m, rho, A, rng)[::m]
        acc.add(zeta[..., None] * E[paths])
    return acc.result()


def relative_spectrum_error(S_hat, S_ref) -> np.ndarray:
    """Entrywise error normalised by ``sqrt(S_kk S_ll)``, averaged over the grid.

    Off-diagonal entries of a cross spectrum can vanish while the channels
    themselves carry power, so the error is measured against the geometric
    mean of the two auto-spectra (equal to plain relative error on the
    diagonal).
    """
    diag = np.real(np.einsum("fkk->fk", S_ref))
    scale = np.sqrt(np.abs(diag[:, :, None] * diag[:, None, :]))
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(scale > 0, np.abs(S_hat - S_ref) / scale, 0.0)
    return err.mean(axis=0)
