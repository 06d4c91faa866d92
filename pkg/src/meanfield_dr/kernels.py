"""Hot inner loops: counter-based random draws, population stepping, chain sampling.

Every kernel exists twice: an ``@njit`` loop version and a vectorised numpy
version.  Both consume the same counter-based uniforms, so they produce
bit-identical results.  The numba path is used when numba imports and the
environment variable ``MEANFIELD_DR_NUMBA`` is not set to ``0``.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


ENV_FLAG = "MEANFIELD_DR_NUMBA"

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


def use_numba():
    """True when the compiled kernels are active (checked on every call)."""
    return HAVE_NUMBA and os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


def backend_name():
    return "numba" if use_numba() else "numpy"


# ---------------------------------------------------------------------------
# counter-based uniforms
# ---------------------------------------------------------------------------

def _mix64_np(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _MIX1
    x = x ^ (x >> np.uint64(27))
    x = x * _MIX2
    return x ^ (x >> np.uint64(31))


def stream_keys(seed, n, offset=0):
    """Per-stream keys for streams ``offset .. offset+n-1`` under ``seed``.

    A key is the starting state of an independent splitmix64 sequence; the
    draw at counter ``t`` is ``mix64(key + (t + 1) * golden)``.
    """
    with np.errstate(over="ignore"):
        base = _mix64_np(np.array([seed], dtype=np.uint64) * _GOLDEN + _GOLDEN)
        idx = np.arange(offset, offset + n, dtype=np.uint64)
        return _mix64_np(base ^ (idx * _MIX2 + _GOLDEN))


def counter_uniform(keys, counter):
    """Uniforms in [0, 1) for each key at one integer counter (numpy path)."""
    with np.errstate(over="ignore"):
        keys = np.asarray(keys, dtype=np.uint64)
        x = _mix64_np(keys + np.uint64(counter + 1) * _GOLDEN)
    return (x >> np.uint64(11)).astype(np.float64) * _INV53


@njit(cache=True, inline="always")
def _uniform_nb(key, counter):
    x = key + np.uint64(counter + 1) * np.uint64(0x9E3779B97F4A7C15)
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    x = x ^ (x >> np.uint64(31))
    return np.float64(x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _counter_uniform_nb(keys, counter):
    out = np.empty(keys.shape[0])
    for i in range(keys.shape[0]):
        out[i] = _uniform_nb(keys[i], counter)
    return out


class CounterStream:
    """Sequential view of one counter-based stream, with a Generator-like ``random``."""

    def __init__(self, seed, index=0):
        self.key = stream_keys(seed, 1, offset=index)
        self.counter = 0

    def random(self, size=None):
        if size is None:
            u = counter_uniform(self.key, self.counter)[0]
            self.counter += 1
            return float(u)
        n = int(np.prod(size))
        out = np.empty(n)
        for j in range(n):
            out[j] = counter_uniform(self.key, self.counter + j)[0]
        self.counter += n
        return out.reshape(size)


# ---------------------------------------------------------------------------
# padded successor tables
# ---------------------------------------------------------------------------

def successor_table(P):
    """Padded successor lists of a sparse transition matrix.

    Returns ``(succ, width)`` where ``succ[x, :]`` holds the column indices of
    the nonzero entries of row ``x`` (padded with -1).  The support of a tilted
    matrix equals the support of the nominal one, so the table is built once.
    """
    nnz = (P > 0).sum(axis=1)
    width = int(nnz.max())
    succ = np.full((P.shape[0], width), -1, dtype=np.int64)
    for x in range(P.shape[0]):
        cols = np.flatnonzero(P[x] > 0)
        succ[x, : cols.size] = cols
    return succ, width


def cumulative_rows(P, succ):
    """Cumulative successor probabilities aligned with ``succ``.

    The last real successor of every row gets 2.0 so that round-off in the
    cumulative sum can never leave a draw unassigned.
    """
    probs = np.where(succ >= 0, P[np.arange(P.shape[0])[:, None], np.maximum(succ, 0)], 0.0)
    cum = np.cumsum(probs, axis=1)
    last = (succ >= 0).sum(axis=1) - 1
    cum[np.arange(P.shape[0]), last] = 2.0
    cum[succ < 0] = 2.0
    return cum


# ---------------------------------------------------------------------------
# population step
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _step_loads_nb(states, qos, keys, start, stop, stride, counter, succ, cum,
                   ell, mode, succ_by_mode, beta, lower, upper, opt_out,
                   win_ring, win_sum, n_upd):
    n_override = 0
    n_violation = 0
    width = succ.shape[1]
    win_len = win_ring.shape[1]
    for i in range(start, stop, stride):
        x = states[i]
        u = _uniform_nb(keys[i], counter)
        prop = succ[x, width - 1]
        for k in range(width):
            if u < cum[x, k]:
                prop = succ[x, k]
                break
        new_q = beta * qos[i] + ell[prop]
        if opt_out and (new_q > upper or new_q < lower):
            prop = succ_by_mode[x, 1 - mode[prop]]
            new_q = beta * qos[i] + ell[prop]
            n_override += 1
        if new_q > upper or new_q < lower:
            n_violation += 1
        states[i] = prop
        qos[i] = new_q
        if win_len > 0:
            pos = n_upd[i] % win_len
            on = 1 - mode[prop]
            win_sum[i] += on - win_ring[i, pos]
            win_ring[i, pos] = on
        n_upd[i] += 1
    return n_override, n_violation


def _step_loads_np(states, qos, keys, start, stop, stride, counter, succ, cum,
                   ell, mode, succ_by_mode, beta, lower, upper, opt_out,
                   win_ring, win_sum, n_upd):
    idx = np.arange(start, stop, stride)
    if idx.size == 0:
        return 0, 0
    x = states[idx]
    u = counter_uniform(keys[idx], counter)
    k = np.argmax(u[:, None] < cum[x], axis=1)
    prop = succ[x, k]
    q_old = qos[idx]
    new_q = beta * q_old + ell[prop]
    n_override = 0
    if opt_out:
        bad = (new_q > upper) | (new_q < lower)
        n_override = int(bad.sum())
        if n_override:
            alt = succ_by_mode[x[bad], 1 - mode[prop[bad]]]
            prop[bad] = alt
            new_q[bad] = beta * q_old[bad] + ell[alt]
    n_violation = int(((new_q > upper) | (new_q < lower)).sum())
    states[idx] = prop
    qos[idx] = new_q
    win_len = win_ring.shape[1]
    if win_len > 0:
        pos = n_upd[idx] % win_len
        on = (1 - mode[prop]).astype(win_ring.dtype)
        win_sum[idx] += on.astype(win_sum.dtype) - win_ring[idx, pos]
        win_ring[idx, pos] = on
    n_upd[idx] += 1
    return n_override, n_violation


def step_loads(*args):
    """Advance the loads ``start, start+stride, ... < stop`` by one decision.

    Mutates ``states``, ``qos`` and the moving-window buffers in place and
    returns ``(n_override, n_violation)``.  ``mode[x]`` is 0 for on-states and
    1 for off-states; ``succ_by_mode[x, k]`` is the legal successor of ``x``
    whose mode is ``k`` (or -1).
    """
    if use_numba():
        n_o, n_v = _step_loads_nb(*args)
        return int(n_o), int(n_v)
    return _step_loads_np(*args)


# ---------------------------------------------------------------------------
# many independent chains (Monte-Carlo oracles)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _simulate_chains_nb(x0, keys, n_steps, succ, cum, counter0):
    n_chains = x0.shape[0]
    width = succ.shape[1]
    out = np.empty((n_chains, n_steps + 1), dtype=np.int64)
    for c in range(n_chains):
        x = x0[c]
        out[c, 0] = x
        for t in range(n_steps):
            u = _uniform_nb(keys[c], counter0 + t)
            nxt = succ[x, width - 1]
            for k in range(width):
                if u < cum[x, k]:
                    nxt = succ[x, k]
                    break
            x = nxt
            out[c, t + 1] = x
    return out


def _simulate_chains_np(x0, keys, n_steps, succ, cum, counter0):
    out = np.empty((x0.shape[0], n_steps + 1), dtype=np.int64)
    out[:, 0] = x0
    x = x0.astype(np.int64).copy()
    for t in range(n_steps):
        u = counter_uniform(keys, counter0 + t)
        k = np.argmax(u[:, None] < cum[x], axis=1)
        x = succ[x, k]
        out[:, t + 1] = x
    return out


def simulate_chains(x0, keys, n_steps, succ, cum, counter0=0):
    """Trajectories ``(n_chains, n_steps + 1)`` of independent chains.

    Chain ``c`` uses stream ``keys[c]`` at counters ``counter0, counter0+1, ...``.
    """
    x0 = np.ascontiguousarray(x0, dtype=np.int64)
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    if use_numba():
        return _simulate_chains_nb(x0, keys, int(n_steps), succ, cum, int(counter0))
    return _simulate_chains_np(x0, keys, int(n_steps), succ, cum, int(counter0))


def set_threads(n):
    """Cap numba's thread pool (no-op without numba)."""
    if HAVE_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
