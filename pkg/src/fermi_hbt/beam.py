"""Arrival-time generation with a prescribed Gaussian pair correlation.

The target second-order correlation is ``g2(t) = 1 - alpha * exp(-t**2 / (2 tau_c**2))``.
Streams are built by renewal thinning: candidates from a homogeneous Poisson
process are accepted with probability ``g2(t - t_prev) / M``, where ``t_prev`` is
the last *accepted* arrival and ``M = max g2``.  Pair correlations then match the
target up to terms of order ``rate * tau_c``, which is why :class:`BeamConfig`
refuses ``rate * tau_c > 1e-2``.

Seeds: every random draw comes from ``numpy.random.SeedSequence([seed, stream, chunk])``
(see :func:`derive_rng`), so cycles can be generated independently and in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate, special

from .exceptions import RegimeError, ValidationError

__all__ = [
    "CorrelationModel",
    "BeamConfig",
    "G2Estimate",
    "g2_target",
    "g2_bin_average",
    "candidate_rate",
    "derive_rng",
    "generate_stream",
    "empirical_g2",
    "MAX_RATE_TAU",
]

MAX_RATE_TAU = 1e-2

# substream ids for derive_rng
STREAM_BEAM = 0
STREAM_RESPONSE = 1
STREAM_CROSSTALK = 2
STREAM_BACKGROUND = 3


def derive_rng(seed: int, stream: int, chunk: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream, chunk)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(chunk)]))


@dataclass(frozen=True)
class CorrelationModel:
    alpha: float = 1.0
    tau_c: float = 120.0  # ns

    def __post_init__(self):
        if not -1.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [-1, 1], got {self.alpha}")
        if not (self.tau_c > 0 and math.isfinite(self.tau_c)):
            raise ValidationError(f"tau_c must be finite and > 0, got {self.tau_c}")

    @property
    def beta(self) -> float:
        return 1.0 / (2.0 * self.tau_c**2)

    @property
    def ceiling(self) -> float:
        """Maximum of g2 over all lags; the thinning envelope."""
        return 1.0 - self.alpha if self.alpha < 0 else 1.0


@dataclass(frozen=True)
class BeamConfig:
    rate: float = 3000.0  # s^-1
    duration: float = 10.0  # s
    model: CorrelationModel = CorrelationModel()
    seed: int = 0

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValidationError(f"rate must be finite and > 0, got {self.rate}")
        if not self.duration >= 0:
            raise ValidationError(f"duration must be >= 0, got {self.duration}")
        rt = self.rate * self.model.tau_c * 1e-9
        if rt > MAX_RATE_TAU:
            raise RegimeError(
                f"rate * tau_c = {rt:.3g} exceeds {MAX_RATE_TAU:g}; renewal thinning is "
                "only valid when pairs within a coherence time are rare"
            )


def g2_target(t, model: CorrelationModel):
    t = np.asarray(t, dtype=float)
    out = 1.0 - model.alpha * np.exp(-model.beta * t * t)
    return out if out.ndim else float(out)


def g2_bin_average(edges, model: CorrelationModel) -> np.ndarray:
    """Exact average of :func:`g2_target` over each ``[edges[i], edges[i+1])``."""
    edges = np.asarray(edges, dtype=float)
    s = math.sqrt(model.beta)
    cum = model.alpha * math.sqrt(math.pi) / (2 * s) * special.erf(s * edges)
    width = np.diff(edges)
    return 1.0 - np.diff(cum) / width


def _mean_interval_excess(lam: float, model: CorrelationModel) -> float:
    """``E[interval] - 1/lam`` for the renewal process with candidate rate ``lam``."""
    a = model.alpha * model.tau_c * math.sqrt(math.pi / 2.0)
    s = math.sqrt(model.beta)
    cut = 12.0 * model.tau_c

    def integrand(x):
        return math.exp(-lam * x) * math.expm1(lam * a * math.erf(s * x))

    head, _ = integrate.quad(integrand, 0.0, cut, epsabs=0.0, epsrel=1e-12, limit=200)
    tail = math.exp(-lam * cut) * math.expm1(lam * a) / lam
    return head + tail


def candidate_rate(rate: float, model: CorrelationModel, tol: float = 1e-13) -> float:
    """Rate (per ns) of accepted-candidate hazard that yields the requested mean rate.

    Solves ``E[interval](lam) = 1/rate`` by fixed-point iteration; the thinning
    deficit is about ``rate * alpha * tau_c * sqrt(pi/2)``.
    """
    target = 1e9 / rate  # mean interval, ns
    lam = 1.0 / target
    if model.alpha == 0.0:
        return lam
    for _ in range(100):
        new = 1.0 / (target - _mean_interval_excess(lam, model))
        if abs(new - lam) <= tol * lam:
            return new
        lam = new
    return lam


@njit(cache=True)
def _thin(gaps, u, t, t_prev, alpha, beta, ceiling):
    out = np.empty(gaps.shape[0])
    k = 0
    for i in range(gaps.shape[0]):
        t += gaps[i]
        dt = t - t_prev
        if dt <= 0.0:
            continue
        if u[i] * ceiling < 1.0 - alpha * np.exp(-beta * dt * dt):
            out[k] = t
            k += 1
            t_prev = t
    return out[:k], t, t_prev


def generate_stream(cfg: BeamConfig, offset_ns: float = 0.0, chunk: int = 0) -> np.ndarray:
    """Sorted, strictly increasing arrival times (ns) in ``[offset, offset + duration)``.

    ``chunk`` selects an independent substream of ``cfg.seed``; the simulator
    uses one chunk per acquisition cycle.
    """
    model = cfg.model
    span = cfg.duration * 1e9
    if span <= 0:
        return np.empty(0)
    rng = derive_rng(cfg.seed, STREAM_BEAM, chunk)
    lam = candidate_rate(cfg.rate, model) * model.ceiling
    block = max(1024, int(lam * span * 1.05) + 64)
    t, t_prev = 0.0, -np.inf
    pieces = []
    while t < span:
        gaps = rng.exponential(1.0 / lam, block)
        u = rng.random(block)
        acc, t, t_prev = _thin(gaps, u, t, t_prev, model.alpha, model.beta, model.ceiling)
        pieces.append(acc)
        block = max(1024, block // 4)
    times = np.concatenate(pieces)
    times = times[times < span]
    if offset_ns:
        times = times + offset_ns
    return times


@dataclass
class G2Estimate:
    bin_edges: np.ndarray
    counts: np.ndarray
    expected: np.ndarray  # Poisson expectation for the same number of events and span
    g2: np.ndarray
    err: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


def _ordered_pair_lags(times: np.ndarray, max_lag: float):
    idx = np.arange(times.shape[0] - 1)
    k = 1
    while idx.size:
        j = idx + k
        keep = j < times.shape[0]
        idx, j = idx[keep], j[keep]
        lag = times[j] - times[idx]
        near = lag < max_lag
        if not near.any():
            break
        yield lag[near]
        idx = idx[near]
        k += 1


def empirical_g2(times, bin_width: float, max_lag: float, duration: float | None = None) -> G2Estimate:
    """Normalized density of ordered pairs ``i < j`` versus lag ``t_j - t_i``.

    Counts are divided by the expectation for ``N`` uniformly scattered events
    over the same span ``T`` (``duration`` ns, default: last minus first time):
    ``N (N-1) / T**2 * integral over the bin of (T - u) du``.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValidationError("empirical_g2 needs at least one event")
    if not bin_width > 0:
        raise ValidationError("bin_width must be > 0")
    if not max_lag > bin_width:
        raise ValidationError("max_lag must exceed bin_width")
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValidationError("times must be sorted")
    nbins = int(math.ceil(max_lag / bin_width - 1e-12))
    edges = np.arange(nbins + 1) * bin_width
    counts = np.zeros(nbins, dtype=np.int64)
    for lag in _ordered_pair_lags(times, nbins * bin_width):
        counts += np.bincount((lag // bin_width).astype(np.int64), minlength=nbins)[:nbins]
    n = times.size
    span = float(duration) if duration is not None else float(times[-1] - times[0])
    if span > 0 and n > 1:
        a, b = edges[:-1], np.minimum(edges[1:], span)
        b = np.maximum(a, b)
        expected = n * (n - 1) / span**2 * (span * (b - a) - 0.5 * (b**2 - a**2))
    else:
        expected = np.zeros(nbins)
    with np.errstate(divide="ignore", invalid="ignore"):
        g2 = np.where(expected > 0, counts / expected, np.nan)
        err = np.where(expected > 0, np.sqrt(counts) / expected, np.nan)
    return G2Estimate(edges, counts, expected, g2, err)
