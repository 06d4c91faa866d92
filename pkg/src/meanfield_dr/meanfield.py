"""Mean-field recursion, its linearisation and frequency-domain controller design."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .loadmodel import ControlledFamily, tilt_transition


@dataclass(frozen=True)
class LinearModel:
    """Linearised aggregate ``Phi' = A Phi + B zeta``, ``y = C Phi``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    eigvals: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.eigvals is None:
            object.__setattr__(self, "eigvals", np.linalg.eigvals(np.atleast_2d(self.A)))

    @property
    def d(self) -> int:
        return np.atleast_2d(self.A).shape[0]


def check_distribution(mu, atol=1e-10):
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < -atol) or abs(mu.sum() - 1.0) > atol:
        raise ValueError("distribution must be nonnegative and sum to 1")
    return mu


def meanfield_step(mu, zeta: float, family: ControlledFamily) -> np.ndarray:
    """One step of the nonlinear recursion ``mu P_zeta``."""
    return np.asarray(mu, dtype=float) @ tilt_transition(family, zeta)


def linearize(family: ControlledFamily) -> LinearModel:
    """``A = P0^T``, ``B = pi0 E``, ``C = U``."""
    return LinearModel(A=family.P0.T.copy(), B=family.pi0 @ family.E, C=family.U.copy())


def aggregate_output(mu, family: ControlledFamily) -> float:
    return float(np.asarray(mu) @ family.U)


def frequency_response(model: LinearModel, theta: float) -> complex:
    """``G_p(e^{j theta}) = C (e^{j theta} I - A)^{-1} B``.

    Raises
    ------
    ValueError
        When ``e^{j theta}`` coincides with an eigenvalue of ``A`` (for a
        stochastic chain this happens at ``theta = 0``, eigenvalue 1).
    """
    z = np.exp(1j * theta)
    A = np.atleast_2d(model.A)
    gap = np.abs(model.eigvals - z)
    k = int(np.argmin(gap))
    if gap[k] < 1e-9:
        lam = model.eigvals[k]
        raise ValueError(
            f"resolvent singular at theta={theta:g}: e^(j theta) hits eigenvalue "
            f"{lam.real:.6g}{lam.imag:+.6g}j of A (the unit eigenvalue 1 of a stochastic chain at theta=0)")
    x = np.linalg.solve(z * np.eye(A.shape[0]) - A, np.atleast_1d(model.B).astype(complex))
    return complex(np.atleast_1d(model.C) @ x)


def supersampled_response(model: LinearModel, theta, m: int):
    """Grid-rate transfer from the broadcast ``zeta`` to the aggregate deviation.

    With ``m`` classes acting in rotation and each class holding its output for
    ``m`` grid steps, ``G(e^{j theta}) = (1/m) sum_i e^{j i theta} G_p(e^{j m theta})``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    out = np.empty(theta.shape, dtype=complex)
    for n, th in enumerate(theta):
        hold = np.mean(np.exp(1j * th * np.arange(m)))
        out[n] = hold * frequency_response(model, m * th)
    return out if out.size > 1 else complex(out[0])


# ---------------------------------------------------------------------------
# PI design
# ---------------------------------------------------------------------------

def plant_zeros(model: LinearModel, drop_stationary: bool = True) -> np.ndarray:
    """Finite invariant zeros of ``(A, B, C, 0)`` from the Rosenbrock pencil.

    For a stochastic chain ``1^T A = 1^T`` and ``1^T B = 0``, so the mode at
    ``z = 1`` cannot be excited and shows up as a decoupling zero that cancels
    the pole at 1.  ``drop_stationary`` removes one such zero.
    """
    d = model.d
    A = np.atleast_2d(model.A)
    M = np.block([[A, np.reshape(model.B, (d, 1))], [np.reshape(model.C, (1, d)), np.zeros((1, 1))]])
    N = np.zeros((d + 1, d + 1))
    N[:d, :d] = np.eye(d)
    z = linalg.eigvals(M, N)
    z = z[np.isfinite(z)]
    if drop_stationary and abs(np.sum(model.B)) < 1e-12 and z.size:
        i = np.argmin(np.abs(z - 1.0))
        if abs(z[i] - 1.0) < 1e-8:
            z = np.delete(z, i)
    return z


def is_minimum_phase(model: LinearModel, tol: float = 1e-9) -> bool:
    """All zeros (apart from the stationary decoupling zero) strictly inside the unit disc."""
    return bool(np.all(np.abs(plant_zeros(model)) < 1.0 - tol))


def pi_response(kp, ki, theta):
    """``kp + ki / (1 - e^{-j theta})`` (integrator includes the current error)."""
    return kp + ki / (1.0 - np.exp(-1j * np.asarray(theta)))


@dataclass
class LoopMargins:
    crossover: float
    phase_margin_deg: float
    gain_margin: float


def loop_margins(model: LinearModel, m: int, kp: float, ki: float, n_grid: int = 6000) -> LoopMargins:
    """Crossover, phase margin and gain margin of the sampled PI loop."""
    th = np.linspace(1e-4, np.pi - 1e-4, n_grid)
    L = pi_response(kp, ki, th) * supersampled_response(model, th, m)
    mag = np.abs(L)
    below = np.flatnonzero(mag < 1.0)
    if below.size == 0:
        return LoopMargins(np.nan, np.nan, np.nan)
    i = below[0]
    pm = 180.0 + np.degrees(np.angle(L[i]))
    phase = np.unwrap(np.angle(L))
    cross = np.flatnonzero(phase < -np.pi)
    gm = 1.0 / mag[cross[0]] if cross.size else np.inf
    return LoopMargins(float(th[i]), float(pm), float(gm))


def design_pi(model: LinearModel, m: int, theta_c: float, phase_margin_deg: float = 60.0):
    """PI gains placing the loop crossover at ``theta_c`` with the given phase margin.

    Solves ``C(e^{j theta_c}) G(e^{j theta_c}) = e^{j(PM - 180 deg)}`` for
    ``(kp, ki)``; returns ``(kp, ki)``.
    """
    target = np.exp(1j * np.radians(phase_margin_deg - 180.0)) / supersampled_response(model, theta_c, m)
    # ki / (1 - e^{-j th}) = ki/2 - j ki/(2 tan(th/2))
    ki = -2.0 * target.imag * np.tan(theta_c / 2.0)
    kp = target.real - 0.5 * ki
    return float(kp), float(ki)


def tune_pi(model: LinearModel, m: int, phase_margin_deg: float = 60.0, min_gain_margin: float = 2.5,
            candidates=None):
    """Fastest crossover (on a grid) whose design keeps positive gains and the margins.

    Returns ``(kp, ki, theta_c, margins)``.
    """
    if candidates is None:
        candidates = np.pi * np.arange(0.05, 0.5001, 0.05)
    best = None
    for thc in candidates:
        kp, ki = design_pi(model, m, thc, phase_margin_deg)
        if kp <= 0 or ki <= 0:
            continue
        mg = loop_margins(model, m, kp, ki)
        if mg.gain_margin >= min_gain_margin and mg.phase_margin_deg >= phase_margin_deg - 1.0:
            best = (kp, ki, float(thc), mg)
    if best is None:
        raise ValueError("no candidate crossover satisfies the margin constraints")
    return best


# ---------------------------------------------------------------------------
# time-domain helpers
# ---------------------------------------------------------------------------

def simulate_meanfield(family: ControlledFamily, zeta, mu0=None) -> np.ndarray:
    """Outputs ``y_t`` of the nonlinear recursion driven by ``zeta_0..zeta_{T-1}``.

    ``y[0]`` is the output of ``mu0``; ``y[t+1]`` follows the step with ``zeta[t]``.
    """
    mu = family.pi0.copy() if mu0 is None else np.asarray(mu0, float).copy()
    y = np.empty(len(zeta) + 1)
    y[0] = mu @ family.U
    for t, z in enumerate(zeta):
        mu = mu @ tilt_transition(family, z)
        y[t + 1] = mu @ family.U
    return y


def simulate_linear(model: LinearModel, zeta) -> np.ndarray:
    """Deviation output ``C Phi_t`` of the LTI model from ``Phi_0 = 0``."""
    phi = np.zeros(model.d)
    out = np.empty(len(zeta) + 1)
    out[0] = 0.0
    for t, z in enumerate(zeta):
        phi = model.A @ phi + model.B * z
        out[t + 1] = model.C @ phi
    return out


def linearization_error(family: ControlledFamily, eps: float, omega: float = 2 * np.pi / 48,
                        n_steps: int = 2000) -> float:
    """Max deviation between nonlinear and linear outputs for ``zeta = eps sin(omega t)``."""
    zeta = eps * np.sin(omega * np.arange(n_steps))
    y_nl = simulate_meanfield(family, zeta) - family.ybar0
    y_lin = simulate_linear(linearize(family), zeta)
    return float(np.abs(y_nl - y_lin).max())


def simulate_meanfield_supersampled(family: ControlledFamily, zeta, m: int, mu0=None) -> np.ndarray:
    """Grid-rate mean-field output with ``m`` classes in rotation.

    At grid step ``t`` class ``t mod m`` moves with ``zeta[t-1]`` (zero at
    ``t = 0``); ``y[t]`` is the class-averaged output after that move.  This
    mirrors the timing of :func:`meanfield_dr.gridsim.run_open_loop`.
    """
    mu = np.tile(family.pi0 if mu0 is None else np.asarray(mu0, float), (m, 1))
    y = np.empty(len(zeta))
    prev = 0.0
    for t in range(len(zeta)):
        k = t % m
        mu[k] = mu[k] @ tilt_transition(family, prev)
        y[t] = mu.mean(axis=0) @ family.U
        prev = zeta[t]
    return y
