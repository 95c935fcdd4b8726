"""Weighted nonlinear least squares for the broadened antibunching model.

Free parameters are ``(alpha, tau_c, baseline)``; ``tau_t`` and ``delta`` are held
fixed.  The optimizer is Levenberg-Marquardt with the analytic Jacobian from
:func:`fermi_hbt.model.c_exp_jacobian`, run in internal coordinates
``(alpha * tau_c, log tau_c, baseline)``; bounds are enforced by clamping each
trial step.  Convergence needs a small projected gradient *and* a small step on
two successive iterations; both are measured in units set by the curvature, so
near-degenerate directions (``tau_c`` on data without a dip) do not stall it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .exceptions import ValidationError
from .model import BroadenedModel, _closed, _jacobian

__all__ = ["FitResult", "fit_curve", "fit_histogram", "histogram_lag_offset", "BroadenedDipRegressor", "PARAM_NAMES", "BOUNDS"]

PARAM_NAMES = ("alpha", "tau_c", "baseline")
BOUNDS = (np.array([0.0, 1.0, -np.inf]), np.array([2.0, 1e4, np.inf]))
MIN_POINTS = 10


@dataclass
class FitResult:
    alpha: float
    alpha_err: float
    tau_c: float
    tau_c_err: float
    baseline: float
    baseline_err: float
    chi2: float
    dof: int
    covariance: np.ndarray
    converged: bool
    iterations: int
    at_bound: tuple = ()
    chi2_alt: float = float("nan")  # chi2 over the complementary point selection (see ``decimate``)
    dof_alt: int = 0
    decimate: int = 1
    method: str = "lm"
    message: str = ""
    tau_t: float = float("nan")
    delta: float = float("nan")
    lag_offset: float = 0.0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.alpha, self.tau_c, self.baseline])

    def model(self) -> BroadenedModel:
        return BroadenedModel(self.alpha, self.tau_c, self.tau_t, self.delta, self.baseline)

    def predict(self, t) -> np.ndarray:
        """Fitted curve at reported lags ``t`` (the lag offset applied)."""
        t = np.asarray(t, dtype=float)
        return np.asarray(_closed(t + self.lag_offset, self.model()), dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariance"] = np.asarray(self.covariance).tolist()
        d["at_bound"] = list(self.at_bound)
        return d

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, indent=2, default=float)


def _model_at(p, tau_t, delta):
    return BroadenedModel(p[0], p[1], tau_t, delta, p[2])


def _chi2(p, t, y, sigma, tau_t, delta):
    r = (y - _closed(t, _model_at(p, tau_t, delta))) / sigma
    return float(r @ r)


# The optimizer works in q = (alpha * tau_c, log tau_c, baseline).  The dip area
# is linear in the first coordinate, which straightens the alpha-tau_c valley
# that appears when the data carry little or no dip.
_LOG_TAU = (np.log(BOUNDS[0][1]), np.log(BOUNDS[1][1]))


def _to_internal(p):
    return np.array([p[0] * p[1], np.log(p[1]), p[2]])


def _to_external(q):
    tau = np.exp(q[1])
    return np.array([q[0] / tau, tau, q[2]])


def _clip_internal(q):
    u = min(max(q[1], _LOG_TAU[0]), _LOG_TAU[1])
    tau = np.exp(u)
    alpha = min(max(q[0] / tau, BOUNDS[0][0]), BOUNDS[1][0])
    return np.array([alpha * tau, u, q[2]])


def _internal_jacobian(t, p, tau_t, delta):
    J = _jacobian(t, _model_at(p, tau_t, delta))
    out = np.empty_like(J)
    out[:, 0] = J[:, 0] / p[1]
    out[:, 1] = p[1] * J[:, 1] - p[0] * J[:, 0]
    out[:, 2] = J[:, 2]
    return out


def _on_bound(value, bound):
    # alpha = (alpha * tau) / tau need not round-trip exactly
    return bool(np.isfinite(bound)) and abs(value - bound) <= 1e-9 * max(1.0, abs(bound))


def _free_basis(q, g):
    """Orthonormal basis of step directions that keep active bounds active.

    A bound is active when the parameter sits on it and the gradient ``g``
    (descent direction ``J^T r``) points outward.  The bounded functions are
    ``alpha = q0 exp(-q1)`` and ``log tau_c = q1``.
    """
    p = _to_external(q)
    normals = []
    # gradients of alpha and of log tau_c with respect to q
    for value, lo, hi, n in (
        (p[0], BOUNDS[0][0], BOUNDS[1][0], np.array([1.0 / p[1], -p[0], 0.0])),
        (q[1], _LOG_TAU[0], _LOG_TAU[1], np.array([0.0, 1.0, 0.0])),
    ):
        push = n @ g
        if (_on_bound(value, lo) and push < 0) or (_on_bound(value, hi) and push > 0):
            normals.append(n)
    if not normals:
        return np.eye(3)
    _, sv, vt = np.linalg.svd(np.array(normals))
    rank = int(np.sum(sv > 1e-14 * sv[0]))
    return vt[rank:].T


def _gradient_norm(g, H, Z):
    """Squared gradient length in the curvature metric, restricted to the columns of ``Z``.

    This is the chi2 drop a Gauss-Newton step would predict, so it does not
    depend on how the parameters are scaled.
    """
    if Z.shape[1] == 0:
        return 0.0
    gz = Z.T @ g
    return float(max(gz @ np.linalg.pinv(Z.T @ H @ Z) @ gz, 0.0))


def _levenberg_marquardt(t, y, sigma, p0, tau_t, delta, max_iter, gtol, xtol):
    lo, hi = BOUNDS
    q = _clip_internal(_to_internal(np.clip(np.asarray(p0, dtype=float), lo, hi)))
    lam, nu = 1e-3, 2.0
    chi2 = _chi2(_to_external(q), t, y, sigma, tau_t, delta)
    streak = 0
    it = 0
    message = "maximum iterations reached"
    converged = False
    for it in range(1, max_iter + 1):
        p = _to_external(q)
        r = (y - _closed(t, _model_at(p, tau_t, delta))) / sigma
        A = _internal_jacobian(t, p, tau_t, delta) / sigma[:, None]
        g = A.T @ r
        H = A.T @ A
        Z = _free_basis(q, g)
        # step lengths are measured against the coordinate's uncertainty or size, whichever is larger
        scale = np.maximum(np.abs(q), np.sqrt(np.clip(np.diag(np.linalg.pinv(H)), 0.0, None)))
        scale = np.maximum(scale, 1e-12)
        Hz, gz = Z.T @ H @ Z, Z.T @ g
        step = np.zeros(3)
        while Z.shape[1]:
            D = np.diag(np.maximum(np.diag(Hz), 1e-30))
            h = np.linalg.lstsq(Hz + lam * D, gz, rcond=None)[0]
            trial = _clip_internal(q + Z @ h)
            trial_chi2 = _chi2(_to_external(trial), t, y, sigma, tau_t, delta)
            if trial_chi2 <= chi2:
                # gain ratio: actual over predicted chi2 decrease (Nielsen's damping update)
                predicted = h @ (lam * D @ h + gz)
                rho = (chi2 - trial_chi2) / predicted if predicted > 0 else 0.0
                step = trial - q
                q, chi2 = trial, trial_chi2
                lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-12)
                nu = 2.0
                break
            lam *= nu
            nu *= 2.0
            if lam > 1e16:
                break
        grad = _gradient_norm(g, H, Z) / (1.0 + chi2)
        small_step = np.max(np.abs(step) / scale) < xtol
        streak = streak + 1 if (grad < gtol and small_step) else 0
        if streak >= 2:
            converged = True
            message = "converged"
            break
        if lam > 1e16:
            # no downhill step exists at machine precision
            converged = grad < gtol
            message = "converged (step limit)" if converged else "stalled"
            break
    return _to_external(q), chi2, it, converged, message


def _profile_start(t, y, sigma, tau_t, delta, n_grid=41):
    """Starting point from a scan over ``tau_c``.

    At fixed ``tau_c`` the model is linear in ``alpha`` and the baseline, so each
    grid point costs one weighted linear solve (``alpha`` clamped to its bounds).
    """
    w = 1.0 / sigma
    best = None
    for tau in np.geomspace(BOUNDS[0][1], BOUNDS[1][1], n_grid):
        shape = _closed(t, BroadenedModel(1.0, tau, tau_t, delta, 0.0))
        X = np.column_stack([shape, np.ones_like(t)]) * w[:, None]
        a, b = np.linalg.lstsq(X, y * w, rcond=None)[0]
        if not BOUNDS[0][0] <= a <= BOUNDS[1][0]:
            a = min(max(a, BOUNDS[0][0]), BOUNDS[1][0])
            b = np.sum((y - a * shape) * w * w) / np.sum(w * w)
        chi2 = float(np.sum(((y - b - a * shape) * w) ** 2))
        if best is None or chi2 < best[0]:
            best = (chi2, (a, tau, b))
    return best[1]


def _covariance(t, sigma, p, tau_t, delta):
    A = _jacobian(t, _model_at(p, tau_t, delta)) / sigma[:, None]
    H = A.T @ A
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)
    return 0.5 * (cov + cov.T)


def fit_curve(
    t,
    y,
    sigma,
    tau_t: float,
    delta: float,
    init=(0.5, 100.0, 1.0),
    max_iter: int = 200,
    gtol: float = 1e-8,
    xtol: float = 1e-10,
    decimate: int = 1,
    fallback: bool = False,
    multistart: bool = True,
    lag_offset: float = 0.0,
) -> FitResult:
    """Fit ``c_exp_closed`` to ``y +- sigma`` at lags ``t``.

    ``decimate=k`` fits every k-th point only (independent windows when
    ``k = delta / bin_width``).  ``chi2_alt`` reports the chi2 of the other point
    selection at the same optimum: all points when decimating, every
    ``delta``-spaced point otherwise.

    With ``multistart`` a second run starts from the best point of a ``tau_c``
    scan; on data with little or no dip the chi2 surface has several shallow
    basins.  ``iterations`` counts the selected run only.

    The model is evaluated at ``t + lag_offset``.  Lags built from clock-tick
    differences are centred half a tick below the bin edge they are filed
    under, so such data want ``lag_offset = -tick / 2``
    (:func:`fit_histogram` sets this from the histogram's metadata).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    check_consistent_length(t, y, sigma)
    if t.shape[0] < MIN_POINTS:
        raise ValidationError(f"need at least {MIN_POINTS} points to fit, got {t.shape[0]}")
    if np.any(t < 0):
        raise ValidationError("negative lags are not accepted")
    if decimate < 1:
        raise ValidationError("decimate must be >= 1")
    if not np.isfinite(lag_offset):
        raise ValidationError("lag_offset must be finite")
    te = t + lag_offset
    sel = np.arange(0, t.shape[0], decimate)
    ts, ys, ss = te[sel], y[sel], sigma[sel]
    if ts.shape[0] < MIN_POINTS:
        raise ValidationError(f"decimation leaves {ts.shape[0]} points; need {MIN_POINTS}")
    if not np.all(ss > 0) or not np.all(np.isfinite(ss)):
        raise ValidationError("all fitted points need finite errors > 0")

    starts = [init]
    if multistart:
        starts.append(_profile_start(ts, ys, ss, tau_t, delta))
    runs = [_levenberg_marquardt(ts, ys, ss, p0, tau_t, delta, max_iter, gtol, xtol) for p0 in starts]
    # converged runs first, then lowest chi2; ties keep the caller's init
    p, chi2, iters, converged, message = min(runs, key=lambda run: (not run[3], run[1]))
    method = "lm"
    if not converged and fallback:
        lo, hi = BOUNDS
        res = minimize(
            _chi2,
            p,
            args=(ts, ys, ss, tau_t, delta),
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000},
        )
        p, chi2, more, converged, message = _levenberg_marquardt(ts, ys, ss, res.x, tau_t, delta, max_iter, gtol, xtol)
        iters += more
        method = "lm+simplex"

    cov = _covariance(ts, ss, p, tau_t, delta)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    lo, hi = BOUNDS
    at_bound = tuple(name for name, v, l, h in zip(PARAM_NAMES, p, lo, hi) if _on_bound(v, l) or _on_bound(v, h))

    if decimate > 1:
        alt_t, alt_y, alt_s = te, y, sigma
    else:
        k = max(1, int(round(delta / (t[1] - t[0])))) if t.shape[0] > 1 and t[1] > t[0] else 1
        alt = np.arange(0, t.shape[0], k)
        alt_t, alt_y, alt_s = te[alt], y[alt], sigma[alt]
    ok = alt_s > 0
    chi2_alt = _chi2(p, alt_t[ok], alt_y[ok], alt_s[ok], tau_t, delta)

    return FitResult(
        alpha=float(p[0]),
        alpha_err=float(err[0]),
        tau_c=float(p[1]),
        tau_c_err=float(err[1]),
        baseline=float(p[2]),
        baseline_err=float(err[2]),
        chi2=chi2,
        dof=int(ts.shape[0] - 3),
        covariance=cov,
        converged=bool(converged),
        iterations=int(iters),
        at_bound=at_bound,
        chi2_alt=chi2_alt,
        dof_alt=int(ok.sum() - 3),
        decimate=int(decimate),
        method=method,
        message=message,
        tau_t=float(tau_t),
        delta=float(delta),
        lag_offset=float(lag_offset),
    )


def histogram_lag_offset(hist) -> float:
    """``-tick / 2`` when the histogram records its clock period, else 0."""
    period = hist.metadata.get("tick_period_ns")
    if period is None:
        return 0.0
    try:
        return -float(Fraction(str(period))) / 2.0
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"bad tick_period_ns in histogram metadata: {period!r}") from None


def fit_histogram(hist, tau_t: float, delta: float | None = None, lag_offset: float | None = None, **options) -> FitResult:
    """Fit a :class:`~fermi_hbt.coincidence.DelayHistogram` (normalized curve and errors).

    ``delta`` defaults to the histogram's analysis window and ``lag_offset`` to
    :func:`histogram_lag_offset`.
    """
    if delta is None:
        if hist.config is None:
            raise ValidationError("delta is required when the histogram carries no config")
        delta = hist.config.delta
    if lag_offset is None:
        lag_offset = histogram_lag_offset(hist)
    return fit_curve(hist.t_ns, hist.c_norm, hist.err, tau_t, delta, lag_offset=lag_offset, **options)


class BroadenedDipRegressor(RegressorMixin, BaseEstimator):
    """Regressor ``lag -> windowed coincidence rate`` with fitted ``(alpha, tau_c, baseline)``.

    ``fit(X, y, sigma=None)`` takes lags as ``X`` (shape ``(n,)`` or ``(n, 1)``),
    the normalized curve as ``y`` and per-point errors as ``sigma`` (default 1).
    """

    def __init__(
        self,
        tau_t_ns=140.0,
        delta_ns=400.0,
        alpha_init=0.5,
        tau_c_init_ns=100.0,
        baseline_init=1.0,
        max_iter=200,
        gtol=1e-8,
        xtol=1e-10,
        decimate=1,
        fallback=False,
        multistart=True,
        lag_offset_ns=0.0,
    ):
        self.tau_t_ns = tau_t_ns
        self.delta_ns = delta_ns
        self.alpha_init = alpha_init
        self.tau_c_init_ns = tau_c_init_ns
        self.baseline_init = baseline_init
        self.max_iter = max_iter
        self.gtol = gtol
        self.xtol = xtol
        self.decimate = decimate
        self.fallback = fallback
        self.multistart = multistart
        self.lag_offset_ns = lag_offset_ns

    @staticmethod
    def _lags(X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X = check_array(X)
        if X.shape[1] != 1:
            raise ValidationError("X must hold a single lag column")
        return X[:, 0]

    def fit(self, X, y, sigma=None):
        t = self._lags(X)
        y = np.asarray(y, dtype=float)
        sigma = np.ones_like(y) if sigma is None else np.asarray(sigma, dtype=float)
        self.result_ = fit_curve(
            t,
            y,
            sigma,
            self.tau_t_ns,
            self.delta_ns,
            init=(self.alpha_init, self.tau_c_init_ns, self.baseline_init),
            max_iter=self.max_iter,
            gtol=self.gtol,
            xtol=self.xtol,
            decimate=self.decimate,
            fallback=self.fallback,
            multistart=self.multistart,
            lag_offset=self.lag_offset_ns,
        )
        self.alpha_ = self.result_.alpha
        self.tau_c_ = self.result_.tau_c
        self.baseline_ = self.result_.baseline
        self.covariance_ = self.result_.covariance
        self.n_iter_ = self.result_.iterations
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return self.result_.predict(self._lags(X))
