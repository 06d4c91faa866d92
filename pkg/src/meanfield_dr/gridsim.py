"""Closed-loop population engine: N loads in m classes under a broadcast PI command.

Timing at grid step ``t`` (burn-in steps included in ``t``):

1. loads of class ``t mod m`` draw their next state from ``P_zeta`` with the
   command ``zeta_{t-1}`` issued at the previous step, pass it through the
   opt-out filter and update their discounted QoS;
2. the aggregate ``y_t`` is measured over all loads;
3. the controller maps ``e_t = r_t - (y_t - ybar0)`` to the next command.

The random draw of load ``i`` at step ``t`` is a pure function of
``(seed, i, t)``, so results do not depend on the worker count or on whether
the numba or numpy kernels run.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .loadmodel import ControlledFamily, build_nominal_pool_model, tilt_transition
from .qos import PooledHistogram, QoSBounds, half_life, predict_mean_qos

log = logging.getLogger(__name__)

# PI gains from meanfield.tune_pi on the default pool model (m = 6): the
# fastest crossover on a 0.05*pi grid with 60 deg phase margin and gain margin >= 2.5.
DEFAULT_KP = 81.70
DEFAULT_KI = 11.225

INIT_COUNTER = 1 << 62


class SimulationDiverged(RuntimeError):
    """Raised when the tracking error stays above 1 for too long."""


class QoSInvariantError(RuntimeError):
    """Raised when opt-out is enabled and a load still leaves the QoS band."""


@dataclass
class SimConfig:
    """Parameters of one population experiment.

    Load ``i`` is in class ``i mod m``; when ``n_loads`` is not a multiple of
    ``m`` the class sizes differ by at most one.

    ``burn_in_steps`` defaults to twice the discount half-life, expressed in
    grid steps and rounded up to a multiple of ``m``.
    """

    n_loads: int = 10_000
    m: int = 6
    T_g_minutes: float = 5.0
    beta: float = 0.9975
    lower: float = -20.0
    upper: float = 20.0
    kp: float = DEFAULT_KP
    ki: float = DEFAULT_KI
    zeta_max: float = 50.0
    scale: float = 1.0
    seed: int = 0
    opt_out: bool = True
    I_max: int = 48
    switch_prob: float = 1.0 / 24
    burn_in_steps: Optional[int] = None
    T_f: int = 314
    workers: int = 1
    hist_width: float = 1.0
    divergence_steps: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_loads < 1 or self.m < 1:
            raise ValueError("n_loads and m must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        QoSBounds(self.lower, self.upper).validate(self.beta)
        if self.zeta_max <= 0:
            raise ValueError("zeta_max must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.T_f < 0:
            raise ValueError("T_f must be nonnegative")
        return self

    @property
    def load_period_minutes(self) -> float:
        return self.m * self.T_g_minutes

    @property
    def tau_s_hours(self) -> float:
        return self.load_period_minutes / 60.0

    @property
    def burn_in(self) -> int:
        if self.burn_in_steps is not None:
            return int(self.burn_in_steps)
        load_steps = math.ceil(2.0 * half_life(self.beta))
        return load_steps * self.m

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# controller and per-load override
# ---------------------------------------------------------------------------

@dataclass
class PIState:
    integral: float = 0.0


def controller_step(state: PIState, e_t: float, kp: float, ki: float, zeta_max: float = 50.0):
    """PI law ``zeta = kp e + ki sum e`` with clamping and conditional integration.

    Returns ``(new_state, zeta, saturated)``.  When the unclamped command
    exceeds ``zeta_max`` and the current error pushes further into
    saturation, the integrator is frozen.
    """
    if not np.isfinite(e_t):
        raise SimulationDiverged(f"non-finite tracking error {e_t}")
    integ = state.integral + e_t
    zeta = kp * e_t + ki * integ
    saturated = abs(zeta) > zeta_max
    if saturated:
        if np.sign(e_t) == np.sign(zeta) and ki != 0.0:
            integ = state.integral
        zeta = float(np.clip(kp * e_t + ki * integ, -zeta_max, zeta_max))
    return PIState(integ), float(zeta), bool(saturated)


def opt_out_override(state: int, proposed: int, qos_value: float, family: ControlledFamily,
                     bounds: QoSBounds, beta: float):
    """Return ``(next_state, overridden)`` after the local QoS check.

    ``state`` and ``proposed`` are flat indices; ``proposed`` must be a legal
    successor of ``state``.
    """
    ell = 2.0 * family.U - 1.0
    new_q = beta * qos_value + ell[proposed]
    if bounds.lower <= new_q <= bounds.upper:
        return int(proposed), False
    alt = int(family.succ_by_mode[state, 1 - family.mode[proposed]])
    if alt < 0:
        raise QoSInvariantError(f"state {state} has no successor in the opposite mode")
    q_alt = beta * qos_value + ell[alt]
    if not bounds.lower <= q_alt <= bounds.upper:
        raise QoSInvariantError(f"override infeasible from L={qos_value}: both successors leave the band")
    return alt, True


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

@dataclass
class LoadPopulation:
    """Per-load arrays.  Load ``i`` belongs to class ``i mod m``."""

    states: np.ndarray
    qos: np.ndarray
    keys: np.ndarray
    m: int
    win_ring: np.ndarray
    win_sum: np.ndarray
    n_updates: np.ndarray

    @property
    def n(self) -> int:
        return self.states.size

    @property
    def classes(self) -> np.ndarray:
        return np.arange(self.n) % self.m

    def empirical_distribution(self, d: int) -> np.ndarray:
        return np.bincount(self.states, minlength=d) / self.n

    def window_ontime(self, tau_s: float):
        """Moving-window on-time (hours) and the mask of loads whose window is full."""
        full = self.n_updates >= self.win_ring.shape[1]
        return self.win_sum * tau_s, full

    @classmethod
    def initial(cls, family: ControlledFamily, n: int, m: int, seed: int, window: int = 0,
                init=None) -> "LoadPopulation":
        keys = kernels.stream_keys(seed, n)
        if init is None:
            u = kernels.counter_uniform(keys, INIT_COUNTER)
            states = np.searchsorted(np.cumsum(family.pi0), u, side="right")
            states = np.minimum(states, family.d - 1).astype(np.int64)
        else:
            states = np.broadcast_to(np.asarray(init, dtype=np.int64), (n,)).copy()
        return cls(states=states, qos=np.zeros(n), keys=keys, m=m,
                   win_ring=np.zeros((n, window), dtype=np.int8),
                   win_sum=np.zeros(n, dtype=np.int64),
                   n_updates=np.zeros(n, dtype=np.int64))


def step_cumulative(family: ControlledFamily, zeta: float) -> np.ndarray:
    """Cumulative successor probabilities of ``P_zeta`` aligned with ``family.succ``."""
    return kernels.cumulative_rows(tilt_transition(family, zeta), family.succ)


class _Stepper:
    """Applies one class update, optionally fanned out over threads."""

    def __init__(self, family: ControlledFamily, pop: LoadPopulation, cfg: SimConfig):
        self.family = family
        self.pop = pop
        self.cfg = cfg
        self.ell = 2.0 * family.U - 1.0
        self.mode = family.mode
        self.pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __call__(self, t: int, cum: np.ndarray):
        pop, cfg, m = self.pop, self.cfg, self.pop.m
        k = t % m
        per_class = len(range(k, pop.n, m))

        def run(a, b):
            return kernels.step_loads(
                pop.states, pop.qos, pop.keys, k + a * m, k + b * m, m, t,
                self.family.succ, cum, self.ell, self.mode, self.family.succ_by_mode,
                cfg.beta, cfg.lower, cfg.upper, cfg.opt_out,
                pop.win_ring, pop.win_sum, pop.n_updates)

        if self.pool is None:
            return run(0, per_class)
        bounds = np.linspace(0, per_class, cfg.workers + 1).astype(int)
        results = list(self.pool.map(run, bounds[:-1], bounds[1:]))
        return sum(r[0] for r in results), sum(r[1] for r in results)


def population_step(pop: LoadPopulation, zeta_t: float, t: int, family: ControlledFamily,
                    config: SimConfig):
    """Move class ``t mod m`` with command ``zeta_t``; return ``(pop, y_t, n_override)``."""
    stepper = _Stepper(family, pop, config)
    try:
        n_o, n_v = stepper(t, step_cumulative(family, zeta_t))
    finally:
        stepper.close()
    if config.opt_out and n_v:
        raise QoSInvariantError(f"{n_v} QoS violations at step {t} with opt-out enabled")
    return pop, float(family.U[pop.states].mean()), n_o


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("t_minutes", "r", "y", "y_tilde", "e", "zeta", "zeta_saturated",
                 "optout_count", "optout_frac", "L_bar", "two_R_beta")


@dataclass
class SimTrace:
    """Per-grid-step record of the horizon (burn-in excluded) plus terminal snapshots."""

    t_minutes: np.ndarray
    r: np.ndarray
    y: np.ndarray
    y_tilde: np.ndarray
    e: np.ndarray
    zeta: np.ndarray
    zeta_saturated: np.ndarray
    optout_count: np.ndarray
    optout_frac: np.ndarray
    L_bar: np.ndarray
    two_R_beta: np.ndarray
    final_qos: np.ndarray
    final_window_hours: np.ndarray
    window_full: np.ndarray
    qos_hist: PooledHistogram
    violations: int
    overrides: int
    burn_in: int
    backend: str
    wall_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.r.size

    @property
    def optout_held_frac(self) -> np.ndarray:
        """Fraction of loads whose current state came from an override.

        An opted-out load keeps the overridden state until its next update
        ``m`` grid steps later, so this is the trailing ``m``-step sum of
        ``optout_count`` over N.  Diagnostic only: ``optout_frac`` counts the
        override events of a single step.
        """
        m, n = self.meta.get("m", 1), self.meta.get("n_loads")
        if not n:
            raise ValueError("trace lacks n_loads metadata")
        return np.convolve(self.optout_count, np.ones(m))[: len(self)] / n

    @property
    def tracking_rms(self) -> float:
        return float(np.sqrt(np.mean(self.e ** 2)))

    @property
    def tracking_nrmse(self) -> float:
        """RMS tracking error over RMS reference (nan for an all-zero reference)."""
        ref = float(np.sqrt(np.mean(self.r ** 2)))
        return self.tracking_rms / ref if ref > 0 else float("nan")

    def columns(self) -> dict:
        return {c: getattr(self, c) for c in TRACE_COLUMNS}

    def write_csv(self, path):
        cols = self.columns()
        header = ",".join(TRACE_COLUMNS)
        data = np.column_stack([np.asarray(cols[c], dtype=float) for c in TRACE_COLUMNS])
        fmt = ["%.6f"] + ["%.17g"] * (len(TRACE_COLUMNS) - 1)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def read_trace_csv(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {c: np.asarray(data[c]) for c in data.dtype.names}


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def burn_in_reference(r_start: float, n: int, ramp: int) -> np.ndarray:
    """Burn-in reference: zero, then a raised-cosine ramp to ``r_start`` over the last ``ramp`` steps.

    The ramp avoids a step in the reference when the horizon begins while
    keeping the discounted reference accumulated during burn-in small.
    """
    out = np.zeros(n)
    ramp = min(ramp, n)
    if ramp > 0:
        s = np.arange(1, ramp + 1) / ramp
        out[n - ramp:] = r_start * 0.5 * (1.0 - np.cos(np.pi * s))
    return out


def _engine(cfg: SimConfig, family: ControlledFamily, reference: np.ndarray,
            zeta_fixed: Optional[np.ndarray], burn_in: int, init=None) -> SimTrace:
    t0 = time.perf_counter()
    horizon = reference.size
    total = burn_in + horizon
    r_full = np.concatenate([burn_in_reference(reference[0] if horizon else 0.0, burn_in, 12 * cfg.m), reference])
    pop = LoadPopulation.initial(family, cfg.n_loads, cfg.m, cfg.seed, window=cfg.T_f + 1, init=init)
    stepper = _Stepper(family, pop, cfg)
    U = family.U
    cap = 1.0 / (1.0 - cfg.beta)
    hist = PooledHistogram(-cap, cap, cfg.hist_width)

    out = {c: np.empty(horizon) for c in TRACE_COLUMNS}
    ctrl = PIState()
    zeta_prev = 0.0
    cum_cache = {0.0: step_cumulative(family, 0.0)}
    overrides = violations = 0
    run_bad = 0
    try:
        for t in range(total):
            if zeta_prev in cum_cache:
                cum = cum_cache[zeta_prev]
            else:
                cum = step_cumulative(family, zeta_prev)
            n_o, n_v = stepper(t, cum)
            if cfg.opt_out and n_v:
                raise QoSInvariantError(f"{n_v} QoS violations at grid step {t} with opt-out enabled")
            y = float(U[pop.states].mean())
            y_tilde = y - family.ybar0
            e = r_full[t] - y_tilde
            if zeta_fixed is None:
                ctrl, zeta, sat = controller_step(ctrl, e, cfg.kp, cfg.ki, cfg.zeta_max)
            else:
                zeta = float(zeta_fixed[t - burn_in]) if t >= burn_in else 0.0
                sat = False
            run_bad = run_bad + 1 if abs(e) > 1.0 else 0
            if run_bad >= cfg.divergence_steps:
                raise SimulationDiverged(
                    f"|e| > 1 for {run_bad} consecutive grid steps (t={t}, e={e:.3f}, zeta={zeta:.3f}); "
                    "check gains and reference scale")
            if t >= burn_in:
                h = t - burn_in
                overrides += n_o
                violations += n_v
                out["r"][h] = r_full[t]
                out["y"][h] = y
                out["y_tilde"][h] = y_tilde
                out["e"][h] = e
                out["zeta"][h] = zeta
                out["zeta_saturated"][h] = sat
                out["optout_count"][h] = n_o
                out["optout_frac"][h] = n_o / cfg.n_loads
                out["L_bar"][h] = pop.qos.mean()
                if t % cfg.m == cfg.m - 1:
                    hist.add(pop.qos)
            zeta_prev = zeta
    finally:
        stepper.close()

    out["t_minutes"] = np.arange(horizon) * cfg.T_g_minutes
    out["two_R_beta"] = predict_mean_qos(r_full, cfg.beta, cfg.m)[burn_in:]
    window, full = pop.window_ontime(cfg.tau_s_hours)
    return SimTrace(**out, final_qos=pop.qos.copy(), final_window_hours=window, window_full=full,
                    qos_hist=hist, violations=violations, overrides=overrides, burn_in=burn_in,
                    backend=kernels.backend_name(), wall_seconds=time.perf_counter() - t0,
                    meta={"m": cfg.m, "n_loads": cfg.n_loads})


def _family_for(cfg: SimConfig, family: Optional[ControlledFamily]) -> ControlledFamily:
    return family if family is not None else build_nominal_pool_model(cfg.I_max, cfg.switch_prob)


def run_closed_loop(config: SimConfig, reference, family: Optional[ControlledFamily] = None) -> SimTrace:
    """Track ``config.scale * reference`` with the PI controller.

    A burn-in of ``config.burn_in`` grid steps precedes the horizon so that
    per-load QoS starts from a settled distribution.  Its reference is zero and
    over its last 12 load periods ramps smoothly to the first reference value (see
    :func:`burn_in_reference`).  The returned trace covers the horizon only.
    """
    config.validate()
    family = _family_for(config, family)
    reference = config.scale * np.asarray(reference, dtype=float)
    if not np.all(np.isfinite(reference)):
        raise ValueError("reference contains non-finite values")
    return _engine(config, family, reference, None, config.burn_in)


def run_open_loop(config: SimConfig, zeta, family: Optional[ControlledFamily] = None,
                  burn_in: int = 0, init=None) -> SimTrace:
    """Drive the population with a given command sequence (no feedback, ``r = 0``)."""
    config.validate()
    family = _family_for(config, family)
    zeta = np.asarray(zeta, dtype=float)
    return _engine(config, family, np.zeros(zeta.size), zeta, burn_in, init=init)


def run_meanfield_closed_loop(config: SimConfig, reference, family: Optional[ControlledFamily] = None):
    """Closed loop with the population replaced by its ``N -> infinity`` limit.

    Uses the same burn-in, class rotation and PI law as :func:`run_closed_loop`.
    Returns ``(zeta, y_tilde)`` over the horizon.  The finite-population
    fluctuation that feeds back through the controller is absent here.
    """
    config.validate()
    family = _family_for(config, family)
    reference = config.scale * np.asarray(reference, dtype=float)
    burn_in, m = config.burn_in, config.m
    r_full = np.concatenate([burn_in_reference(reference[0] if reference.size else 0.0, burn_in, 12 * m),
                             reference])
    mu = np.tile(family.pi0, (m, 1))
    ctrl = PIState()
    zeta_prev = 0.0
    zeta = np.empty(r_full.size)
    y_tilde = np.empty(r_full.size)
    for t in range(r_full.size):
        k = t % m
        mu[k] = mu[k] @ tilt_transition(family, zeta_prev)
        y_tilde[t] = mu.mean(axis=0) @ family.U - family.ybar0
        ctrl, zeta_prev, _ = controller_step(ctrl, r_full[t] - y_tilde[t], config.kp, config.ki, config.zeta_max)
        zeta[t] = zeta_prev
    return zeta[burn_in:], y_tilde[burn_in:]
