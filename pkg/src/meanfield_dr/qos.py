"""Per-load quality-of-service metrics and the discounted reference."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .loadmodel import ON, PoolState


@dataclass(frozen=True)
class QoSBounds:
    """Opt-out band ``[lower, upper]`` for the discounted QoS."""

    lower: float = -20.0
    upper: float = 20.0

    def validate(self, beta: float) -> "QoSBounds":
        cap = 1.0 / (1.0 - beta)
        if not self.lower < 0.0 < self.upper:
            raise ValueError(f"bounds must satisfy lower < 0 < upper, got [{self.lower}, {self.upper}]")
        if not (-cap < self.lower and self.upper < cap):
            raise ValueError(f"bounds must lie inside (-{cap:g}, {cap:g}) for beta={beta}")
        if self.upper - self.lower < 2.0:
            raise ValueError("bound width must be at least 2 so that an override always restores the band")
        return self

    def contains(self, value) -> np.ndarray:
        value = np.asarray(value)
        return (value >= self.lower) & (value <= self.upper)


@dataclass
class QoSAccumulator:
    """Discounted QoS ``L <- beta L + ell`` of one load."""

    value: float = 0.0
    beta: float = 0.9975

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")


def ell_signed(state: PoolState) -> float:
    """+1 when on, -1 when off."""
    return 1.0 if state.mode == ON else -1.0


def ell_ontime(state: PoolState, tau_s: float = 0.5) -> float:
    """Hours of operation credited for one slot of length ``tau_s``."""
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    return tau_s if state.mode == ON else 0.0


def ell_vector(U, kind="signed", tau_s=0.5):
    """``ell`` evaluated on every state, given the on-indicator ``U``."""
    U = np.asarray(U, dtype=float)
    if kind == "signed":
        return 2.0 * U - 1.0
    if kind == "ontime":
        return tau_s * U
    raise ValueError(f"unknown ell kind {kind!r}")


def update_discounted(acc: QoSAccumulator, ell_value: float) -> QoSAccumulator:
    return QoSAccumulator(value=acc.beta * acc.value + ell_value, beta=acc.beta)


def discounted_sum(ell_seq, beta, L0=0.0) -> np.ndarray:
    """All intermediate values of ``L_tau = beta L_{tau-1} + ell_tau``."""
    from scipy.signal import lfilter

    ell_seq = np.asarray(ell_seq, dtype=float)
    return lfilter([1.0], [1.0, -beta], ell_seq, zi=[beta * L0])[0]


def moving_window_qos(ell_history, T_f: int) -> float:
    """Sum of the last ``T_f + 1`` entries of ``ell_history``."""
    h = np.asarray(ell_history, dtype=float)
    if T_f < 0:
        raise ValueError("T_f must be nonnegative")
    if h.size < T_f + 1:
        raise ValueError(f"history of length {h.size} shorter than window T_f+1={T_f + 1}")
    return float(h[h.size - T_f - 1:].sum())


def discounted_reference(r, beta: float, m: int, t: int) -> float:
    """``R_t = sum_k beta^k r_{t - m k}`` by direct summation."""
    r = np.asarray(r, dtype=float)
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0 <= t < r.size:
        raise IndexError(f"t={t} outside reference of length {r.size}")
    idx = np.arange(t, -1, -m)
    return float(np.sum(beta ** np.arange(idx.size) * r[idx]))


def discounted_reference_series(r, beta: float, m: int) -> np.ndarray:
    """``R_t`` for every grid instant via ``R_t = r_t + beta R_{t-m}``."""
    from scipy.signal import lfilter

    r = np.asarray(r, dtype=float)
    if m < 1:
        raise ValueError("m must be >= 1")
    a = np.zeros(m + 1)
    a[0], a[m] = 1.0, -beta
    return lfilter([1.0], a, r)


def predict_mean_qos(r, beta: float, m: int) -> np.ndarray:
    """Population-mean signed QoS under perfect tracking: ``2 R_t``."""
    return 2.0 * discounted_reference_series(r, beta, m)


def half_life(beta: float) -> float:
    """Number of updates after which ``beta**n == 1/2``."""
    return float(np.log(0.5) / np.log(beta))


def histogram_counts(values, width: float = 1.0, lo=None, hi=None):
    """Fixed-width histogram; bin edges are multiples of ``width``."""
    v = np.asarray(values, dtype=float).ravel()
    if lo is None:
        lo = np.floor(v.min() / width) * width if v.size else 0.0
    if hi is None:
        hi = (np.floor(v.max() / width) + 1) * width if v.size else width
    n_bins = max(1, int(round((hi - lo) / width)))
    edges = lo + width * np.arange(n_bins + 1)
    counts, _ = np.histogram(v, bins=edges)
    return edges, counts


class PooledHistogram:
    """Histogram accumulated over repeated snapshots on a fixed grid."""

    def __init__(self, lo: float, hi: float, width: float = 1.0):
        self.width = float(width)
        self.lo = np.floor(lo / width) * width
        n_bins = int(np.ceil((hi - self.lo) / width))
        self.edges = self.lo + width * np.arange(n_bins + 1)
        self.counts = np.zeros(n_bins, dtype=np.int64)
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, values):
        v = np.asarray(values, dtype=float)
        idx = np.clip(np.floor((v - self.lo) / self.width).astype(np.int64), 0, self.counts.size - 1)
        self.counts += np.bincount(idx, minlength=self.counts.size)
        self.n += v.size
        self.s1 += float(v.sum())
        self.s2 += float((v * v).sum())

    @property
    def mean(self) -> float:
        return self.s1 / self.n

    @property
    def std(self) -> float:
        return float(np.sqrt(max(self.s2 / self.n - self.mean ** 2, 0.0)))

    def trimmed(self):
        nz = np.flatnonzero(self.counts)
        if nz.size == 0:
            return self.edges[:2], self.counts[:1]
        a, b = nz[0], nz[-1] + 1
        return self.edges[a:b + 1], self.counts[a:b]


def write_histogram_csv(path, edges, counts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{left:.6g}", f"{right:.6g}", int(c)])


def read_histogram_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    edges = np.r_[data["bin_left"], data["bin_right"][-1:]]
    return edges, data["count"].astype(np.int64)
