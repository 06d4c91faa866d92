"""Spectral risk analysis: regulation-signal ARMA model, PSD estimates, disturbance
spectra of a single load, and the predicted variance of its discounted QoS.

Spectral densities use the convention ``var = (1/2pi) int S(theta) dtheta``,
equivalently the mean of ``S`` over a uniform grid on ``[0, 2pi)``.  Cross
spectra follow ``S^{kl}(theta) = sum_tau E[v_k(0) v_l(tau)] e^{-j tau theta}``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal, stats

from .loadmodel import ControlledFamily

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# regulation signal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ARMACoeffs:
    """``r_t + a1 r_{t-1} + a2 r_{t-2} = w_t + b1 w_{t-1}``, ``w ~ N(0, sigma_w2)``."""

    a1: float = -0.9009
    a2: float = 0.0365
    b1: float = 0.0859
    sigma_w2: float = 0.005

    @property
    def ar(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])

    @property
    def ma(self) -> np.ndarray:
        return np.array([1.0, self.b1])

    def poles(self) -> np.ndarray:
        return np.roots(self.ar)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def validate(self) -> "ARMACoeffs":
        if not self.sigma_w2 > 0:
            raise ValueError("sigma_w2 must be positive")
        if not self.is_stable():
            raise ValueError(f"AR polynomial {self.ar.tolist()} has roots on or outside the unit circle")
        return self

    def psd(self, theta) -> np.ndarray:
        """``sigma_w2 |G_wr(e^{j theta})|^2``."""
        _, h = signal.freqz(self.ma, self.ar, worN=np.atleast_1d(theta))
        return self.sigma_w2 * np.abs(h) ** 2

    def to_dict(self) -> dict:
        return {"a1": self.a1, "a2": self.a2, "b1": self.b1, "sigma_w2": self.sigma_w2}


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def generate_regulation(coeffs: ARMACoeffs, n: int, rng=None, burn: int = 1000) -> np.ndarray:
    """Stationary ARMA(2,1) realisation of length ``n``.

    ``rng`` is a ``numpy.random.Generator`` or a seed; ``burn`` initial samples
    are discarded so the output starts in the stationary regime.
    """
    coeffs.validate()
    rng = _as_rng(rng)
    w = rng.normal(0.0, np.sqrt(coeffs.sigma_w2), n + burn)
    return signal.lfilter(coeffs.ma, coeffs.ar, w)[burn:]


def lowpass_reference(r0, cutoff: float = 0.002) -> np.ndarray:
    """First-order unity-DC-gain low-pass ``r_t = a r_{t-1} + (1-a) r0_t``.

    ``cutoff`` is a fraction of the Nyquist frequency; the pole is
    ``a = exp(-pi cutoff)``.  The filter starts in steady state for the first
    input sample, so a constant input passes unchanged.
    """
    if not 0.0 < cutoff < 0.5:
        raise ValueError(f"cutoff must lie in (0, 0.5), got {cutoff}")
    r0 = np.asarray(r0, dtype=float)
    a = np.exp(-np.pi * cutoff)
    if r0.size == 0:
        return r0.copy()
    out, _ = signal.lfilter([1.0 - a], [1.0, -a], r0, zi=[a * r0[0]])
    return out


@dataclass
class ARMAFit:
    coeffs: ARMACoeffs
    sweeps: int
    converged: bool
    residuals: np.ndarray = field(repr=False)
    ljung_box_stat: float = np.nan
    ljung_box_pvalue: float = np.nan
    ljung_box_lags: int = 20
    reduced: bool = False

    def report(self) -> dict:
        return {**self.coeffs.to_dict(), "sweeps": self.sweeps, "converged": self.converged,
                "reduced_to_ar1": self.reduced,
                "ljung_box": {"lags": self.ljung_box_lags, "statistic": self.ljung_box_stat,
                              "p_value": self.ljung_box_pvalue}}


def ljung_box(residuals, lags: int = 20, n_params: int = 0):
    """Ljung-Box portmanteau statistic and p-value (chi-square with ``lags - n_params`` dof)."""
    x = np.asarray(residuals, dtype=float)
    x = x - x.mean()
    n = x.size
    denom = np.dot(x, x)
    acf = np.array([np.dot(x[:-k], x[k:]) / denom for k in range(1, lags + 1)])
    q = n * (n + 2) * np.sum(acf ** 2 / (n - np.arange(1, lags + 1)))
    dof = max(lags - n_params, 1)
    return float(q), float(stats.chi2.sf(q, dof))


def fit_arma_els(samples, tol: float = 1e-8, max_sweeps: int = 200, lags: int = 20,
                 reduce: bool = True) -> ARMAFit:
    """ARMA(2,1) fit by extended least squares.

    Ordinary least squares on the two AR terms gives the first residuals.  Each
    sweep then regresses ``r_t`` on ``(-r_{t-1}, -r_{t-2}, w_{t-1})`` with the
    innovations ``w`` reconstructed by inverse filtering under the previous
    estimate, until the coefficients move by less than ``tol``.  An MA root
    outside the unit circle is reflected inside (same autocovariance).

    ARMA(2,1) is over-parameterised for data with fewer dynamics: a common
    AR/MA factor leaves a ridge of equivalent fits.  The full fit is therefore
    compared with an AR(1) fit by the Bayesian information criterion (two
    extra parameters, penalty ``2 ln n``); when the AR(1) fit wins it is
    returned with ``a2 = b1 = 0`` and ``reduced = True``.  The likelihood-ratio
    statistic is not chi-square here because the full model is not identified
    under the reduced one, hence BIC rather than a fixed test level.
    """
    y = np.asarray(samples, dtype=float)
    if y.size < 1000:
        raise ValueError(f"need at least 1000 samples, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise ValueError("samples contain non-finite values")
    if np.var(y) == 0.0:
        raise ValueError("degenerate input: zero variance, regression is singular")

    target = y[2:]
    X_ar = np.column_stack([-y[1:-1], -y[:-2]])
    ar, *_ = np.linalg.lstsq(X_ar, target, rcond=None)
    theta = np.array([ar[0], ar[1], 0.0])
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        a1, a2, b1 = theta
        w = signal.lfilter([1.0, a1, a2], [1.0, b1], y)
        X = np.column_stack([X_ar, w[1:-1]])
        new, *_ = np.linalg.lstsq(X, target, rcond=None)
        if abs(new[2]) > 1.0:
            new[2] = 1.0 / new[2]
        step = np.abs(new - theta).max()
        theta = new
        if step < tol:
            converged = True
            break
    a1, a2, b1 = (float(v) for v in theta)
    resid = signal.lfilter([1.0, a1, a2], [1.0, b1], y)[2:]
    s2_full = float(np.mean(resid ** 2))

    # nested AR(1) alternative on the same sample range
    a1_r = float(-np.dot(y[1:-1], target) / np.dot(y[1:-1], y[1:-1]))
    resid_r = target + a1_r * y[1:-1]
    s2_r = float(np.mean(resid_r ** 2))
    lr = resid.size * np.log(s2_r / s2_full)
    reduced = bool(reduce and lr < 2.0 * np.log(resid.size))
    if reduced:
        a1, a2, b1, resid, n_params = a1_r, 0.0, 0.0, resid_r, 1
        converged = True
    else:
        n_params = 3
        if not converged:
            warnings.warn(f"ELS did not converge in {max_sweeps} sweeps; returning last iterate", RuntimeWarning)
    coeffs = ARMACoeffs(a1, a2, b1, float(np.mean(resid ** 2)))
    q, p = ljung_box(resid, lags=lags, n_params=n_params)
    return ARMAFit(coeffs, sweeps, converged, resid, q, p, lags, reduced)


# ---------------------------------------------------------------------------
# PSD estimation
# ---------------------------------------------------------------------------

def estimate_psd(x, segment_length: int = 256):
    """Welch estimate (Hann window, 50% overlap), two-sided on ``theta = 2 pi k / L``.

    Returns ``(theta, S)`` with ``mean(S)`` approximately the variance of ``x``.
    """
    x = np.asarray(x, dtype=float)
    if segment_length < 8:
        raise ValueError("segment_length must be at least 8")
    if x.size < 2 * segment_length:
        raise ValueError(f"signal of length {x.size} shorter than two segments of {segment_length}")
    f, S = signal.welch(x, fs=1.0, window="hann", nperseg=segment_length, noverlap=segment_length // 2,
                        return_onesided=False, detrend="constant", scaling="density")
    theta = 2 * np.pi * np.mod(f, 1.0)
    order = np.argsort(theta)
    return theta[order], S[order]


class CrossSpectrumAccumulator:
    """Welch cross-spectral matrix of a multichannel signal, accumulated segment-wise.

    Feed ``(T, d)`` or ``(batch, T, d)`` arrays; returns ``S`` on the one-sided
    grid ``theta = 2 pi k / L``, ``k = 0..L/2``, with
    ``S[k] = E[conj(F) F^T] / sum(w^2)``.
    """

    def __init__(self, segment_length: int, d: int):
        self.L = int(segment_length)
        self.win = signal.get_window("hann", self.L)
        self.norm = float(np.sum(self.win ** 2))
        self.S = np.zeros((self.L // 2 + 1, d, d), dtype=complex)
        self.count = 0

    @property
    def theta(self):
        return 2 * np.pi * np.arange(self.L // 2 + 1) / self.L

    def add(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        step = self.L // 2
        starts = np.arange(0, x.shape[1] - self.L + 1, step)
        if starts.size == 0:
            return
        # all segments of all batch members at once: (n_seg, L, d)
        idx = starts[:, None] + np.arange(self.L)[None, :]
        seg = x[:, idx, :].reshape(-1, self.L, x.shape[2]) * self.win[None, :, None]
        F = np.fft.rfft(seg, axis=1).transpose(1, 0, 2)  # (freq, n_seg, d)
        self.S += np.matmul(F.conj().transpose(0, 2, 1), F)
        self.count += seg.shape[0]

    def result(self):
        return self.theta, self.S / (self.count * self.norm)


# ---------------------------------------------------------------------------
# single-load disturbance spectra
# ---------------------------------------------------------------------------

def sigma_delta(P0, pi0, tol: float = 1e-8) -> np.ndarray:
    """Covariance of the routing noise: ``Pi - P0^T Pi P0`` with ``Pi = diag(pi0)``."""
    P0 = np.asarray(P0, dtype=float)
    pi0 = np.asarray(pi0, dtype=float)
    res = np.abs(pi0 @ P0 - pi0).max()
    if res > tol:
        raise ValueError(f"pi0 is not invariant for P0 (residual {res:.2e})")
    return np.diag(pi0) - P0.T @ (pi0[:, None] * P0)


def resolvent(P0, varrho: complex) -> np.ndarray:
    """``U = (I - varrho P0)^{-1} = sum_n varrho^n P0^n`` for ``|varrho| < 1``."""
    if abs(varrho) >= 1.0:
        raise ValueError(f"|varrho| must be < 1, got {abs(varrho):.4g}")
    P0 = np.asarray(P0)
    d = P0.shape[0]
    return np.linalg.solve(np.eye(d) - varrho * P0, np.eye(d, dtype=complex))


@dataclass(frozen=True)
class Zeta1Model:
    """Grid-rate AR(1) autocorrelation ``R(n) = sigma_zeta2 rho^|n|``."""

    rho: float
    sigma_zeta2: float

    def validate(self) -> "Zeta1Model":
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1) for the resolvent formula, got {self.rho}")
        if self.sigma_zeta2 < 0:
            raise ValueError("sigma_zeta2 must be nonnegative")
        return self

    @property
    def poles(self):
        return np.array([self.rho])

    @property
    def weights(self):
        return np.array([self.sigma_zeta2])

    def acf(self, lags) -> np.ndarray:
        return self.sigma_zeta2 * self.rho ** np.abs(np.asarray(lags))


@dataclass(frozen=True)
class ZetaPoleModel:
    """Distinct real poles: ``R(n) = sum_j A_j rho_j^|n|``."""

    poles: np.ndarray
    weights: np.ndarray

    def validate(self) -> "ZetaPoleModel":
        p = np.asarray(self.poles)
        if np.iscomplexobj(p) and np.any(np.abs(np.imag(p)) > 0):
            raise ValueError("complex poles are outside the implemented real-pole sum")
        if np.any(np.abs(p) >= 1.0):
            raise ValueError("poles must lie strictly inside the unit interval")
        return self

    @property
    def sigma_zeta2(self) -> float:
        return float(np.sum(self.weights))

    def acf(self, lags) -> np.ndarray:
        lags = np.abs(np.asarray(lags))
        return np.sum(np.asarray(self.weights)[:, None] * np.asarray(self.poles)[:, None] ** lags[None, :], axis=0)


def _bzeta_terms(P0, pi0, E, poles, weights, m, theta):
    d = P0.shape[0]
    EtPi = E.T * pi0[None, :]
    base = EtPi @ E
    S = np.zeros((d, d), dtype=complex)
    for rho, A in zip(poles, weights):
        if A == 0:
            continue
        varrho = (rho ** m) * np.exp(-1j * theta)
        M = EtPi @ resolvent(P0, varrho) @ E
        S += A * (M + M.conj().T - base)
    return S


def psd_bzeta(family: ControlledFamily, zmodel, m: int, theta: float) -> np.ndarray:
    """Cross-spectral matrix of the modulated disturbance ``zeta * eps(X)`` at load rate.

    ``S^{kl} = sigma^2 (<e_k, U e_l> + <e_l, U e_k>^* - <e_k, e_l>)`` with
    ``U = (I - rho^m e^{-j theta} P0)^{-1}``, ``e_k`` the k-th column of ``E``
    and ``<f, g> = sum pi0 f g``.  ``zmodel`` may carry several real poles, in
    which case the terms add.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    zmodel.validate()
    return _bzeta_terms(family.P0, family.pi0, family.E, np.asarray(zmodel.poles, float),
                        np.asarray(zmodel.weights, float), m, theta)


@dataclass
class DisturbancePSD:
    """``S(theta) = S_Bzeta(theta) + Sigma_Delta`` on a uniform grid over ``[0, 2pi)``.

    The matrices are produced on demand (``at`` / ``chunks``) so a fine grid
    does not need ``n_theta * d * d`` complex numbers in memory.
    """

    theta: np.ndarray
    sigma_delta: np.ndarray
    family: ControlledFamily = field(repr=False)
    zmodel: Optional[object] = None
    m: int = 1

    def at(self, i: int) -> np.ndarray:
        return self.evaluate(self.theta[i])

    def evaluate(self, theta: float) -> np.ndarray:
        S = self.sigma_delta.astype(complex)
        if self.zmodel is not None and np.sum(self.zmodel.weights) > 0:
            S = S + psd_bzeta(self.family, self.zmodel, self.m, theta)
        return S

    def chunks(self, size: int = 256):
        for a in range(0, self.theta.size, size):
            idx = np.arange(a, min(a + size, self.theta.size))
            yield idx, np.stack([self.evaluate(th) for th in self.theta[idx]])

    def check_psd(self, floor: float = -1e-9, every: int = 1):
        """Hermitian positive semidefinite at every (``every``-th) grid point."""
        for idx, S in self.chunks():
            keep = idx % every == 0
            S = S[keep]
            herm = np.abs(S - np.conj(np.swapaxes(S, 1, 2))).max() if S.size else 0.0
            if herm > 1e-9:
                raise ValueError(f"S(theta) not Hermitian (max asymmetry {herm:.2e})")
            ev = np.linalg.eigvalsh(S) if S.size else np.zeros((0, 1))
            bad = np.flatnonzero(ev.min(axis=1) < floor) if ev.size else []
            if len(bad):
                th = self.theta[idx[keep][bad[0]]]
                raise ValueError(f"S(theta) not positive semidefinite at theta={th:.6g} "
                                 f"(min eigenvalue {ev[bad[0]].min():.3e})")
        return True


def theta_grid(n: int = 4096) -> np.ndarray:
    return 2 * np.pi * np.arange(n) / n


def disturbance_psd(family: ControlledFamily, zmodel, m: int, theta_grid=None, check: bool = True,
                    check_every: int = 1) -> DisturbancePSD:
    """Compose ``S = S_Bzeta + Sigma_Delta`` (``zmodel=None`` gives the white part only)."""
    th = globals()["theta_grid"]() if theta_grid is None else np.asarray(theta_grid, dtype=float)
    if zmodel is not None:
        zmodel.validate()
    dpsd = DisturbancePSD(th, sigma_delta(family.P0, family.pi0), family, zmodel, m)
    if check:
        dpsd.check_psd(every=check_every)
    return dpsd


# ---------------------------------------------------------------------------
# zeta statistics
# ---------------------------------------------------------------------------

def sample_acf(x, max_lag: int) -> np.ndarray:
    """Biased sample autocovariance at lags ``0..max_lag``."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    return np.array([np.dot(x[: n - k], x[k:]) / n for k in range(max_lag + 1)])


def fit_zeta_model(zeta_trace, m: int = 1) -> Zeta1Model:
    """AR(1) fit at grid rate: ``rho`` = lag-1 autocorrelation, ``sigma2`` = variance.

    A nonpositive ``rho`` is returned with a warning; the resolvent formula
    rejects it later.  ``m`` is only recorded for the caller: the load-rate
    pole is ``rho**m``.
    """
    z = np.asarray(zeta_trace, dtype=float)
    if z.size < 3:
        raise ValueError("zeta trace too short")
    c = sample_acf(z, 1)
    if c[0] == 0:
        return Zeta1Model(0.0, 0.0)
    rho = float(c[1] / c[0])
    if rho <= 0:
        warnings.warn(f"lag-1 autocorrelation {rho:.3f} is not positive; AR(1) spectral model not applicable",
                      RuntimeWarning)
    return Zeta1Model(rho, float(c[0]))


def fit_zeta_poles(zeta_trace, order: int = 2) -> ZetaPoleModel:
    """Sum-of-real-poles autocorrelation from a Yule-Walker AR(``order``) fit.

    The AR poles ``rho_j`` are the roots of the fitted polynomial; the weights
    solve ``sum_j A_j rho_j^n = R(n)`` for ``n = 0..order-1``.
    """
    z = np.asarray(zeta_trace, dtype=float)
    c = sample_acf(z, order)
    R = np.array([[c[abs(i - j)] for j in range(order)] for i in range(order)])
    phi = np.linalg.solve(R, c[1:order + 1])
    poles = np.roots(np.r_[1.0, -phi])
    if np.any(np.abs(np.imag(poles)) > 1e-12):
        raise ValueError(f"fitted poles {poles} are complex; real-pole sum not applicable")
    poles = np.real(poles)
    V = poles[None, :] ** np.arange(order)[:, None]
    weights = np.linalg.solve(V, c[:order])
    return ZetaPoleModel(poles, weights).validate()


# ---------------------------------------------------------------------------
# QoS variance
# ---------------------------------------------------------------------------

def qos_spectrum(P0, pi0, S_chunks, c, beta: float, theta) -> np.ndarray:
    """``S_L(theta)`` for disturbance spectra supplied chunk-wise.

    ``S_L = |1/(1 - beta e^{-j theta})|^2  c~^T H S^T H^H c~`` where
    ``H = (e^{j theta} I - P0^T + pi0 1^T)^{-1}`` is the resolvent with the
    stationary direction deflated and ``c~ = c - (pi0 . c) 1``.  The
    transpose converts the lag convention of ``S`` into the one of the linear
    recursion.  On zero-sum disturbances the deflated and plain resolvents
    agree, and the deflation keeps ``theta = 0`` finite.
    """
    P0 = np.asarray(P0, dtype=float)
    pi0 = np.asarray(pi0, dtype=float)
    d = P0.shape[0]
    c = np.asarray(c, dtype=float)
    ct = c - (pi0 @ c)
    A_defl = P0.T - np.outer(pi0, np.ones(d))
    out = np.empty(np.asarray(theta).size)
    for idx, S in S_chunks:
        z = np.exp(1j * np.asarray(theta)[idx])
        M = z[:, None, None] * np.eye(d)[None] - A_defl[None]
        # g = c~^T H  <=>  H^T g^T = c~
        g = np.linalg.solve(np.swapaxes(M, 1, 2), np.broadcast_to(ct.astype(complex), (idx.size, d))[..., None])[..., 0]
        quad = np.einsum("nk,nlk,nl->n", g, S, g.conj())
        disc = 1.0 / np.abs(1.0 - beta * np.conj(z)) ** 2
        out[idx] = disc * quad.real
    return out


def qos_variance(family: ControlledFamily, dpsd: DisturbancePSD, ell_vector, beta: float,
                 return_spectrum: bool = False):
    """Predicted variance of the discounted QoS of one load.

    ``sigma_L^2 = (1/2pi) int S_L`` evaluated by the rectangle rule on the
    periodic grid of ``dpsd`` (identical to the trapezoid rule for periodic
    integrands).
    """
    if not abs(beta) < 1:
        raise ValueError("|beta| must be < 1")
    if dpsd.theta.size < 2048:
        raise ValueError(f"theta grid has {dpsd.theta.size} points; need at least 2048")
    S_L = qos_spectrum(family.P0, family.pi0, dpsd.chunks(), ell_vector, beta, dpsd.theta)
    var = float(np.mean(S_L))
    if return_spectrum:
        return var, S_L
    return var


def qos_variance_open_loop(family: ControlledFamily, ell_vector, beta: float) -> float:
    """Closed-form discounted-QoS variance under the nominal chain (no control).

    ``Var = c~^T (sum_{k,l} beta^{k+l} P0^{|k-l|}-weighted covariances) c~``
    evaluated as ``[c~^T Pi (I + beta P0)(I - beta P0)^{-1} c~] / (1 - beta^2)``.
    """
    P0, pi0 = family.P0, family.pi0
    c = np.asarray(ell_vector, float)
    ct = c - pi0 @ c
    d = P0.shape[0]
    Rb = np.linalg.solve(np.eye(d) - beta * P0, ct)
    # sum_{n>=0} beta^n Cov(l_0, l_n) = <c~, (I - beta P0)^{-1} c~>_pi
    s = pi0 @ (ct * Rb)
    c0 = pi0 @ (ct * ct)
    return float((2.0 * s - c0) / (1.0 - beta ** 2))
