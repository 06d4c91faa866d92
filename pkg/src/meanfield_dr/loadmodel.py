"""Pool-pump Markov chain: state space, nominal law, exponentially tilted family.

States are ``(mode, sojourn)`` pairs.  Mode 0 is *on* and mode 1 is *off*;
sojourn counts consecutive slots in the current mode and saturates at
``I_max``.  The flat index is ``mode * I_max + (sojourn - 1)``, so the on-states
occupy ``0 .. I_max-1`` and the off-states ``I_max .. 2*I_max-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import math

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels

ON, OFF = 0, 1
ZETA_GUARD = 50.0


@dataclass(frozen=True)
class PoolState:
    """A single load state: ``mode`` (0 on, 1 off) and ``sojourn`` in ``1..I_max``."""

    mode: int
    sojourn: int
    I_max: int = 48

    def __post_init__(self):
        if self.mode not in (ON, OFF):
            raise ValueError(f"mode must be 0 (on) or 1 (off), got {self.mode}")
        if not 1 <= self.sojourn <= self.I_max:
            raise ValueError(f"sojourn {self.sojourn} outside 1..{self.I_max}")

    @property
    def index(self) -> int:
        return self.mode * self.I_max + self.sojourn - 1

    @property
    def is_on(self) -> bool:
        return self.mode == ON

    @classmethod
    def from_index(cls, index: int, I_max: int = 48) -> "PoolState":
        if not 0 <= index < 2 * I_max:
            raise ValueError(f"index {index} outside 0..{2 * I_max - 1}")
        return cls(int(index) // I_max, int(index) % I_max + 1, I_max)


def check_transition_matrix(P, atol=1e-12):
    """Validate a row-stochastic matrix and return it as a float array."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"transition matrix must be square, got shape {P.shape}")
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("transition matrix entries must lie in [0, 1]")
    dev = np.abs(P.sum(axis=1) - 1.0).max()
    if dev > atol:
        raise ValueError(f"rows of transition matrix must sum to 1 (max deviation {dev:.3e})")
    return P


def tilt_matrix(P0, U, zeta):
    """Exponential tilt ``P0(x,x') exp(zeta U(x')) / Z(x)`` of any row-stochastic matrix.

    The normalisation is done in the log domain with a per-row shift, so the
    result stays finite for large ``|zeta|``.  ``zeta == 0`` returns a copy of
    ``P0``.
    """
    P0 = np.asarray(P0, dtype=float)
    zeta = float(zeta)
    if not np.isfinite(zeta):
        raise ValueError("zeta must be finite")
    if zeta == 0.0:
        return P0.copy()
    support = P0 > 0
    with np.errstate(divide="ignore"):
        logw = np.where(support, np.log(np.where(support, P0, 1.0)) + zeta * np.asarray(U, float)[None, :], -np.inf)
    shift = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - shift)
    return w / w.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ControlledFamily:
    """Nominal chain ``P0`` together with its tilted family and derived quantities.

    Attributes
    ----------
    P0 : ndarray (d, d)
        Nominal transition matrix.
    U : ndarray (d,)
        Utility (power) vector, 1 on on-states.
    E : ndarray (d, d)
        Derivative of the tilted family at ``zeta = 0``.
    pi0 : ndarray (d,)
        Invariant distribution of ``P0``.
    ybar0 : float
        Equilibrium aggregate output ``pi0 @ U``.
    """

    P0: np.ndarray
    U: np.ndarray
    E: np.ndarray
    pi0: np.ndarray
    ybar0: float
    I_max: Optional[int] = None
    switch_prob: Optional[float] = None
    succ: np.ndarray = field(default=None, repr=False)
    succ_by_mode: np.ndarray = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.P0.shape[0]

    @property
    def mode(self) -> np.ndarray:
        """0 where ``U`` is positive (on), 1 elsewhere."""
        return np.where(self.U > 0, ON, OFF).astype(np.int64)

    def tilt(self, zeta: float) -> np.ndarray:
        return tilt_transition(self, zeta)


def make_family(P0, U, I_max=None, switch_prob=None) -> ControlledFamily:
    """Assemble a :class:`ControlledFamily` from any nominal chain and utility."""
    P0 = check_transition_matrix(P0)
    U = np.asarray(U, dtype=float)
    if U.shape != (P0.shape[0],):
        raise ValueError("utility vector length must match the chain dimension")
    E = _derivative(P0, U)
    pi0 = invariant_distribution(P0)
    succ, _ = kernels.successor_table(P0)
    mode = np.where(U > 0, ON, OFF)
    by_mode = np.full((P0.shape[0], 2), -1, dtype=np.int64)
    for x in range(P0.shape[0]):
        for k in (ON, OFF):
            cand = [s for s in succ[x] if s >= 0 and mode[s] == k]
            if cand:
                by_mode[x, k] = max(cand, key=lambda s: P0[x, s])
    for arr in (P0, U, E, pi0, succ, by_mode):
        arr.setflags(write=False)
    return ControlledFamily(P0=P0, U=U, E=E, pi0=pi0, ybar0=float(pi0 @ U),
                            I_max=I_max, switch_prob=switch_prob,
                            succ=succ, succ_by_mode=by_mode)


def build_nominal_pool_model(I_max: int = 48, switch_prob: float = 1.0 / 24) -> ControlledFamily:
    """Symmetric pool model with geometric sojourns truncated at ``I_max``.

    From ``(mode, i)`` the load switches to ``(other mode, 1)`` with probability
    ``switch_prob`` and otherwise moves to ``(mode, min(i + 1, I_max))``.
    """
    if int(I_max) != I_max or I_max < 2:
        raise ValueError(f"I_max must be an integer >= 2, got {I_max}")
    if not 0.0 < switch_prob < 1.0:
        raise ValueError(f"switch_prob must lie in (0, 1), got {switch_prob}")
    I_max = int(I_max)
    d = 2 * I_max
    P0 = np.zeros((d, d))
    for k in (ON, OFF):
        for i in range(I_max):
            x = k * I_max + i
            P0[x, k * I_max + min(i + 1, I_max - 1)] += 1.0 - switch_prob
            P0[x, (1 - k) * I_max] += switch_prob
    U = np.zeros(d)
    U[:I_max] = 1.0
    return make_family(P0, U, I_max=I_max, switch_prob=float(switch_prob))


def tilt_transition(family: ControlledFamily, zeta: float) -> np.ndarray:
    """Tilted transition matrix ``P_zeta`` of ``family``."""
    return tilt_matrix(family.P0, family.U, zeta)


def _derivative(P0, U):
    return P0 * (U[None, :] - (P0 @ U)[:, None])


def derivative_matrix(family: ControlledFamily) -> np.ndarray:
    """Closed-form ``dP_zeta/dzeta`` at zero: ``P0(x,x') (U(x') - (P0 U)(x))``."""
    return _derivative(family.P0, family.U)


def recurrent_classes(P):
    """Number of closed communicating classes of a transition matrix."""
    G = csr_matrix(np.asarray(P) > 0)
    n, labels = connected_components(G, directed=True, connection="strong")
    closed = 0
    for c in range(n):
        members = labels == c
        # a class is closed if no edge leaves it
        if not np.any(G[members][:, ~members].toarray()):
            closed += 1
    return closed


def chain_period(P) -> int:
    """Period of the (single) closed class: gcd of level differences along its edges."""
    A = np.asarray(P) > 0
    G = csr_matrix(A)
    n, labels = connected_components(G, directed=True, connection="strong")
    for c in range(n):
        members = np.flatnonzero(labels == c)
        if np.any(A[np.ix_(members, np.setdiff1d(np.arange(A.shape[0]), members))]):
            continue
        level = {members[0]: 0}
        frontier = [members[0]]
        g = 0
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.flatnonzero(A[u]):
                    if v in level:
                        g = math.gcd(g, level[u] + 1 - level[v])
                    else:
                        level[v] = level[u] + 1
                        nxt.append(v)
            frontier = nxt
        return abs(g) if g else 1
    return 1


def invariant_distribution(P, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Invariant law by power iteration.

    Raises
    ------
    ValueError
        If the chain has more than one recurrent class, or the iteration does
        not settle within ``max_iter`` steps (periodicity is then suspected).
    """
    P = check_transition_matrix(P, atol=1e-10)
    n_closed = recurrent_classes(P)
    if n_closed != 1:
        raise ValueError(f"chain has {n_closed} recurrent classes; invariant law not unique (reducible)")
    period = chain_period(P)
    if period > 1:
        raise ValueError(f"chain is periodic with period {period}; power iteration does not converge")
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = pi @ P
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            # one extra sweep keeps the residual comfortably below tol
            pi = nxt @ P
            return pi / pi.sum()
        pi = nxt
    raise ValueError(
        f"power iteration did not converge in {max_iter} steps; chain may be periodic or reducible")


def sample_next(state, P_row, rng):
    """Draw a successor from ``P_row``.

    ``state`` may be a :class:`PoolState` (the result is then a PoolState) or a
    flat index.  ``rng`` needs a ``random()`` method returning a uniform in
    [0, 1); both ``numpy.random.Generator`` and :class:`kernels.CounterStream`
    qualify.
    """
    P_row = np.asarray(P_row, dtype=float)
    if abs(P_row.sum() - 1.0) > 1e-10:
        raise ValueError("P_row must sum to 1")
    cum = np.cumsum(P_row)
    u = rng.random()
    nxt = int(np.searchsorted(cum, u, side="right"))
    # guard against round-off in the last cumulative value
    last = int(np.flatnonzero(P_row > 0)[-1])
    nxt = min(nxt, last)
    while P_row[nxt] == 0:
        nxt += 1
    if isinstance(state, PoolState):
        return PoolState.from_index(nxt, state.I_max)
    return nxt


def mean_sojourn(family: ControlledFamily, mode: int = ON) -> float:
    """Expected number of slots spent in ``mode`` after entering it at sojourn 1.

    Computed from the fundamental matrix of the chain restricted to the mode's
    states (absorption analysis).
    """
    states = np.flatnonzero(family.mode == mode)
    Q = family.P0[np.ix_(states, states)]
    entry = family.succ_by_mode[np.flatnonzero(family.mode != mode)[0], mode]
    start = np.zeros(states.size)
    start[np.searchsorted(states, entry)] = 1.0
    N = np.linalg.solve(np.eye(states.size) - Q, np.ones(states.size))
    return float(start @ N)
