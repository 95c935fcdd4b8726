"""Gaussian-broadened antibunching model of the windowed coincidence rate.

With a Gaussian dip ``1 - c(t) = alpha exp(-beta t^2)``, ``beta = 1 / (2 tau_c^2)``,
and a Gaussian broadening kernel ``sqrt(W/pi) exp(-W t^2)``, ``W = 1 / tau_t^2``,
the box-averaged rate ``(1/delta) * integral_t^{t+delta} (W * c)`` is

    b - alpha / (2 delta) * sqrt(pi / beta) * [erf(sqrt(g) (t + delta)) - erf(sqrt(g) t)]

with ``1/g = 1/beta + 1/W``.  :func:`c_exp_closed` evaluates that expression;
:func:`c_exp_quadrature` integrates the definition numerically and is kept
independent of it on purpose.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import cfunc, types
from scipy import LowLevelCallable, integrate, special
from scipy.constants import physical_constants

from .exceptions import QuadratureError, ValidationError

__all__ = [
    "erf",
    "BroadenedModel",
    "c_exp_closed",
    "c_exp_jacobian",
    "c_exp_quadrature",
    "dip_depth",
    "coherence_to_energy",
    "HBAR_NEV_NS",
]

ERF_CLAMP = 6.0
# reduced Planck constant in neV * ns
HBAR_NEV_NS = physical_constants["reduced Planck constant in eV s"][0] * 1e9 * 1e9


def erf(x):
    """Error function, odd by construction and exactly +-1 for ``|x| >= 6``."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    out = np.where(ax >= ERF_CLAMP, 1.0, special.erf(ax))
    out = np.copysign(out, x)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class BroadenedModel:
    alpha: float
    tau_c: float  # ns
    tau_t: float = 140.0  # ns; 0 disables broadening
    delta: float = 400.0  # ns
    baseline: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "tau_c", "tau_t", "delta", "baseline"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.tau_c <= 0 or self.delta <= 0 or self.tau_t < 0:
            raise ValidationError("need tau_c > 0, delta > 0, tau_t >= 0")

    @property
    def beta(self) -> float:
        return 1.0 / (2.0 * self.tau_c**2)

    @property
    def W(self) -> float:
        return 1.0 / self.tau_t**2 if self.tau_t > 0 else math.inf

    @property
    def gamma(self) -> float:
        return 1.0 / (2.0 * self.tau_c**2 + self.tau_t**2)

    @property
    def tau_eff(self) -> float:
        """rms width of the broadened dip, ``1 / sqrt(2 gamma)``."""
        return math.sqrt(self.tau_c**2 + 0.5 * self.tau_t**2)


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValidationError("lags must be finite and >= 0")
    return t


def _erf_diff(sg, t, delta, erf_fn):
    return erf_fn(sg * (t + delta)) - erf_fn(sg * t)


def _closed(t: np.ndarray, m: BroadenedModel, erf_fn=erf):
    # valid for any real t; the public wrapper enforces t >= 0
    sg = math.sqrt(m.gamma)
    amp = m.alpha / (2.0 * m.delta) * math.sqrt(math.pi / m.beta)
    return m.baseline - amp * _erf_diff(sg, t, m.delta, erf_fn)


def c_exp_closed(t, m: BroadenedModel, erf_fn=erf):
    out = _closed(_check_t(t), m, erf_fn)
    return out if np.ndim(out) else float(out)


def _jacobian(t: np.ndarray, m: BroadenedModel) -> np.ndarray:
    g = m.gamma
    sg = math.sqrt(g)
    D = _erf_diff(sg, t, m.delta, erf)
    a = math.sqrt(2.0 * math.pi) * m.tau_c  # sqrt(pi / beta)
    u = t + m.delta
    dD_dg = (np.exp(-g * u * u) * u - np.exp(-g * t * t) * t) / (math.sqrt(math.pi) * sg)
    dg_dtau = -4.0 * m.tau_c * g * g
    k = 1.0 / (2.0 * m.delta)
    J = np.empty((t.shape[0], 3))
    J[:, 0] = -k * a * D
    J[:, 1] = -k * m.alpha * (math.sqrt(2.0 * math.pi) * D + a * dD_dg * dg_dtau)
    J[:, 2] = 1.0
    return J


def c_exp_jacobian(t, m: BroadenedModel) -> np.ndarray:
    """Partial derivatives of :func:`c_exp_closed` w.r.t. ``(alpha, tau_c, baseline)``."""
    return _jacobian(_check_t(np.atleast_1d(t)), m)


# Integrand of the inner convolution, compiled for scipy's low-level quad:
# xx = (s, t', alpha, beta, W);  sqrt(W/pi) exp(-W s^2) * (1 - alpha exp(-beta (t' - s)^2))
@cfunc(types.double(types.intc, types.CPointer(types.double)))
def _kernel_times_c(n, xx):
    s = xx[0]
    d = xx[1] - s
    w = xx[4]
    return math.sqrt(w / math.pi) * math.exp(-w * s * s) * (1.0 - xx[2] * math.exp(-xx[3] * d * d))


_INNER = LowLevelCallable(_kernel_times_c.ctypes)


def _quad(func, a, b, args, epsabs, points=None, limit=400):
    with np.errstate(all="ignore"):
        res = integrate.quad(
            func, a, b, args=args, epsabs=epsabs, epsrel=0.0, limit=limit, points=points, full_output=1
        )
    value, abserr, info = res[0], res[1], res[2]
    if len(res) > 3 and abserr > epsabs:
        raise QuadratureError(f"quadrature did not converge: {res[3]} (abserr {abserr:.3g})", abserr)
    return value, abserr


def _smoothed(tp: float, m: BroadenedModel, epsabs: float) -> float:
    """``(W * c)(t')``: convolution of the dip profile with the kernel, kernel cut at +-8 tau_t."""
    if m.tau_t == 0:
        return 1.0 - m.alpha * math.exp(-m.beta * tp * tp)
    half = 8.0 * m.tau_t
    points = [tp] if -half < tp < half else None
    val, _ = _quad(_INNER, -half, half, (tp, m.alpha, m.beta, m.W), epsabs, points)
    return val


def c_exp_quadrature(t, m: BroadenedModel, tol: float = 1e-10):
    """Windowed rate by direct nested quadrature (independent of the erf closed form).

    Inner: adaptive quadrature of kernel x dip profile over ``[-8 tau_t, 8 tau_t]``.
    Outer: adaptive quadrature of the inner result over ``[t, t + delta]``.
    Absolute accuracy ``tol``; raises :class:`QuadratureError` otherwise.
    """
    if not tol > 0:
        raise ValidationError("tol must be > 0")
    t = _check_t(t)
    inner_tol = tol / 8.0
    outer_tol = tol * m.delta / 4.0
    out = np.empty(t.shape)
    flat = out.reshape(-1)
    for i, ti in enumerate(np.asarray(t).reshape(-1)):
        val, _ = _quad(_smoothed, ti, ti + m.delta, (m, inner_tol), outer_tol, limit=200)
        flat[i] = m.baseline - 1.0 + val / m.delta
    return out if out.ndim else float(out)


def dip_depth(m: BroadenedModel) -> float:
    """``b - c_exp(0)``: the windowed dip at zero lag.

    For ``gamma * delta**2 >> 1`` this is ``alpha sqrt(pi/2) tau_c / delta``,
    i.e. proportional to ``tau_c / delta``.
    """
    return m.alpha / (2.0 * m.delta) * math.sqrt(math.pi / m.beta) * erf(math.sqrt(m.gamma) * m.delta)


def coherence_to_energy(tau_c) -> float:
    """rms energy spread in neV for a coherence time in ns: ``hbar / tau_c``."""
    tau_c = np.asarray(tau_c, dtype=float)
    if np.any(tau_c <= 0):
        raise ValidationError("tau_c must be > 0")
    out = HBAR_NEV_NS / tau_c
    return out if out.ndim else float(out)
