"""Detector and DAQ response: arrival times in, pixel-tagged tick events out.

Chain order is fixed: :func:`apply_response` -> :func:`inject_crosstalk` ->
:func:`inject_background` -> :func:`apply_duty_cycle` (see :func:`simulate_detector`).

Per-event delay = capture delay + light-decay delay.  Both are truncated
exponentials whose shape parameter is solved so the truncated mean hits the
configured value: capture on ``[0, max_travel]`` (exponential absorption depth
mapped to transit time), decay on ``[0, decay_time]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from .beam import STREAM_BACKGROUND, STREAM_CROSSTALK, STREAM_RESPONSE, derive_rng
from .exceptions import ValidationError
from .timetag import (
    DEFAULT_CLOCK,
    EVENT_DTYPE,
    FLAG_BACKGROUND,
    FLAG_CROSSTALK,
    ClockConfig,
    make_events,
    merge_streams,
    ns_to_ticks,
    sort_events,
)

__all__ = [
    "TruncatedExponential",
    "ScintillatorModel",
    "CrosstalkModel",
    "PixelGrid",
    "DetectorConfig",
    "apply_response",
    "inject_crosstalk",
    "inject_background",
    "apply_duty_cycle",
    "simulate_detector",
]


class TruncatedExponential:
    """Density proportional to ``exp(-k x)`` on ``[0, upper]``, parametrized by its mean.

    ``k`` may be negative (density rising towards ``upper``) when the mean
    exceeds ``upper / 2``; ``k == 0`` is uniform.
    """

    def __init__(self, mean: float, upper: float):
        if not 0 < mean < upper:
            raise ValidationError(f"truncated mean must lie in (0, {upper}), got {mean}")
        self.mean_target = float(mean)
        self.upper = float(upper)
        if abs(mean - upper / 2) < 1e-12 * upper:
            self.k = 0.0
        else:
            self.k = brentq(lambda k: self._mean(k) - mean, -200 / upper, 200 / upper, xtol=1e-15, rtol=1e-15)

    def _mean(self, k):
        T = self.upper
        if abs(k * T) < 1e-8:
            return T / 2
        return 1.0 / k - T / math.expm1(k * T)

    @property
    def mean(self) -> float:
        return self._mean(self.k)

    @property
    def var(self) -> float:
        T, k = self.upper, self.k
        if abs(k * T) < 1e-6:
            return T * T / 12.0
        return 1.0 / (k * k) - (T / (2.0 * math.sinh(k * T / 2.0))) ** 2

    @property
    def scale(self) -> float:
        """Attenuation length of the untruncated exponential (inf when uniform)."""
        return 1.0 / self.k if self.k else math.inf

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random(n)
        T, k = self.upper, self.k
        if k == 0.0:
            return u * T
        return -np.log1p(u * math.expm1(-k * T)) / k


@dataclass(frozen=True)
class ScintillatorModel:
    """Timing response of the lithium-glass scintillator (all times in ns).

    ``rms_total`` is the target rms of the relative delay between two
    detections, the broadening that acts on a measured lag ``t2 - t1``.
    Setting both ``mean_capture`` and ``decay_delay_mean`` to 0 disables all delays.
    """

    decay_time: float = 250.0
    mean_capture: float = 100.0
    max_travel: float = 300.0
    rms_total: float = 140.0
    decay_delay_mean: float = 100.0

    def __post_init__(self):
        if self.mean_capture and not 0 < self.mean_capture < self.max_travel:
            raise ValidationError("need 0 < mean_capture < max_travel")
        if self.decay_delay_mean and not 0 < self.decay_delay_mean < self.decay_time:
            raise ValidationError("need 0 < decay_delay_mean < decay_time")
        if self.decay_time <= 0 or self.rms_total <= 0:
            raise ValidationError("decay_time and rms_total must be > 0")

    @classmethod
    def zero_width(cls) -> "ScintillatorModel":
        return cls(mean_capture=0.0, decay_delay_mean=0.0)

    @cached_property
    def capture(self) -> TruncatedExponential | None:
        return TruncatedExponential(self.mean_capture, self.max_travel) if self.mean_capture else None

    @cached_property
    def decay(self) -> TruncatedExponential | None:
        return TruncatedExponential(self.decay_delay_mean, self.decay_time) if self.decay_delay_mean else None

    @property
    def max_delay(self) -> float:
        return (self.max_travel if self.capture else 0.0) + (self.decay_time if self.decay else 0.0)

    def sample_delays(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.zeros(n)
        if self.capture is not None:
            out += self.capture.sample(rng, n)
        if self.decay is not None:
            out += self.decay.sample(rng, n)
        return out

    @property
    def delay_mean(self) -> float:
        return sum(s.mean for s in (self.capture, self.decay) if s is not None)

    @property
    def delay_std(self) -> float:
        return math.sqrt(sum(s.var for s in (self.capture, self.decay) if s is not None))

    @property
    def kernel_rms(self) -> float:
        """rms of the relative delay ``d2 - d1`` of two independent detections."""
        return math.sqrt(2.0) * self.delay_std

    @property
    def kernel_tau_t(self) -> float:
        """Width parameter for a Gaussian kernel ``exp(-t**2 / tau_t**2)`` with the
        same variance as the simulated relative delay (``tau_t**2 / 2 == kernel_rms**2``)."""
        return math.sqrt(2.0) * self.kernel_rms


@dataclass(frozen=True)
class CrosstalkModel:
    probability: float = 0.0
    jitter_window: float = 150.0  # ns
    neighbor_rule: str = "adjacent"

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"crosstalk probability must be in [0, 1], got {self.probability}")
        if not self.jitter_window > 0:
            raise ValidationError("jitter_window must be > 0")
        if self.neighbor_rule not in ("adjacent", "adjacent8"):
            raise ValidationError(f"unknown neighbor_rule {self.neighbor_rule!r}")


@dataclass(frozen=True)
class PixelGrid:
    rows: int = 8
    cols: int = 8
    pixel_size_mm: float = 5.8

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def position(self, pixel: int) -> tuple[int, int]:
        return divmod(int(pixel), self.cols)

    def neighbor_table(self, rule: str = "adjacent") -> tuple[np.ndarray, np.ndarray]:
        """``(table, count)``: row ``p`` of ``table`` lists the neighbors of pixel ``p``."""
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
        if rule == "adjacent8":
            steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
        table = np.zeros((self.n_pixels, len(steps)), dtype=np.int64)
        count = np.zeros(self.n_pixels, dtype=np.int64)
        for p in range(self.n_pixels):
            r, c = self.position(p)
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < self.rows and 0 <= cc < self.cols:
                    table[p, count[p]] = self.index(rr, cc)
                    count[p] += 1
        return table, count


@dataclass(frozen=True)
class DetectorConfig:
    grid: PixelGrid = field(default_factory=PixelGrid)
    illumination: tuple | None = None  # per-pixel weights; None = uniform over the grid
    scintillator: ScintillatorModel = field(default_factory=ScintillatorModel)
    crosstalk: CrosstalkModel = field(default_factory=CrosstalkModel)
    dark_rate: float = 0.0  # s^-1 per pixel
    clock: ClockConfig = DEFAULT_CLOCK
    cycle_length_ns: int = 10**10
    dead_time_ns: int = 10**7

    def __post_init__(self):
        w = self.weights
        if w.shape[0] != self.grid.n_pixels:
            raise ValidationError(
                f"illumination has {w.shape[0]} weights for {self.grid.n_pixels} pixels"
            )
        if np.any(w < 0) or not w.sum() > 0:
            raise ValidationError("illumination weights must be >= 0 with a positive sum")
        if self.dark_rate < 0:
            raise ValidationError("dark_rate must be >= 0")
        if self.cycle_length_ns <= 0 or self.dead_time_ns < 0:
            raise ValidationError("need cycle_length > 0 and dead_time >= 0")

    @property
    def weights(self) -> np.ndarray:
        if self.illumination is None:
            return np.ones(self.grid.n_pixels)
        return np.asarray(self.illumination, dtype=float)

    @property
    def period_ns(self) -> int:
        return self.cycle_length_ns + self.dead_time_ns


def apply_response(times, cfg: DetectorConfig, seed: int, chunk: int = 0) -> np.ndarray:
    """Delay, assign a pixel to, and digitize each arrival; returns sorted events."""
    times = np.asarray(times, dtype=float)
    rng = derive_rng(seed, STREAM_RESPONSE, chunk)
    n = times.shape[0]
    detected = times + cfg.scintillator.sample_delays(rng, n)
    w = cfg.weights
    pixels = rng.choice(w.shape[0], size=n, p=w / w.sum())
    events = make_events(ns_to_ticks(detected, cfg.clock), pixels)
    return sort_events(events)


def inject_crosstalk(
    events: np.ndarray,
    model: CrosstalkModel,
    seed: int,
    grid: PixelGrid = PixelGrid(),
    clock: ClockConfig = DEFAULT_CLOCK,
    chunk: int = 0,
) -> np.ndarray:
    """With probability ``p`` per event, add a flagged copy on a neighboring pixel
    delayed by ``U[0, jitter_window]`` ns."""
    if model.probability == 0.0 or events.shape[0] == 0:
        return events
    rng = derive_rng(seed, STREAM_CROSSTALK, chunk)
    n = events.shape[0]
    hit = rng.random(n) < model.probability
    src = events[hit]
    table, count = grid.neighbor_table(model.neighbor_rule)
    pix = src["pixel"].astype(np.int64)
    pick = (rng.random(src.shape[0]) * count[pix]).astype(np.int64)
    offset = rng.uniform(0.0, model.jitter_window, src.shape[0])
    dup_ticks = src["tick"] + ns_to_ticks(offset, clock)
    dups = sort_events(make_events(dup_ticks, table[pix, pick], FLAG_CROSSTALK))
    return merge_streams([events, dups])


def inject_background(
    events: np.ndarray,
    dark_rate: float,
    cfg: DetectorConfig,
    seed: int,
    start_ns: float = 0.0,
    stop_ns: float | None = None,
    chunk: int = 0,
) -> np.ndarray:
    """Add an independent Poisson stream per pixel over ``[start_ns, stop_ns)``.

    ``stop_ns`` defaults to the end of the last event's tick.
    """
    if dark_rate < 0:
        raise ValidationError("dark_rate must be >= 0")
    if stop_ns is None:
        stop_ns = float((int(events["tick"][-1]) + 1) * cfg.clock.tick_period_ns) if events.shape[0] else start_ns
    span = stop_ns - start_ns
    if dark_rate == 0.0 or span <= 0:
        return events
    rng = derive_rng(seed, STREAM_BACKGROUND, chunk)
    counts = rng.poisson(dark_rate * span * 1e-9, cfg.grid.n_pixels)
    streams = [events]
    for pixel, k in enumerate(counts):
        if k:
            t = np.sort(rng.uniform(start_ns, stop_ns, k))
            streams.append(make_events(ns_to_ticks(t, cfg.clock), np.full(k, pixel), FLAG_BACKGROUND))
    return merge_streams(streams)


def apply_duty_cycle(
    events: np.ndarray,
    cycle_length_ns: int = 10**10,
    dead_time_ns: int = 10**7,
    clock: ClockConfig = DEFAULT_CLOCK,
) -> np.ndarray:
    """Drop events inside the dead windows ``[k P + C, (k+1) P)``, ``P = C + D``.

    Live windows are half-open, so an event exactly at a cycle end is dropped.
    """
    if dead_time_ns == 0 or events.shape[0] == 0:
        return events
    p = clock.tick_period_ns
    period = np.uint64((cycle_length_ns + dead_time_ns) * p.denominator)
    phase = (events["tick"] * np.uint64(p.numerator)) % period
    return events[phase < np.uint64(cycle_length_ns * p.denominator)]


def simulate_detector(
    times,
    cfg: DetectorConfig,
    seed: int,
    start_ns: float = 0.0,
    stop_ns: float | None = None,
    chunk: int = 0,
) -> np.ndarray:
    """Full chain: response, cross-talk, background over ``[start_ns, stop_ns)``, duty cycle."""
    events = apply_response(times, cfg, seed, chunk)
    events = inject_crosstalk(events, cfg.crosstalk, seed, cfg.grid, cfg.clock, chunk)
    events = inject_background(events, cfg.dark_rate, cfg, seed, start_ns, stop_ns, chunk)
    return apply_duty_cycle(events, cfg.cycle_length_ns, cfg.dead_time_ns, cfg.clock)


def empty_events() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)
