"""Start-stop coincidence analysis of pixel-tagged event streams.

Pipeline: :func:`clean_events` (cross-talk veto, then same-group dedup) ->
:func:`delay_histogram` (every D1 event is a start, every later D2 event within
``max_lag`` a stop) -> :func:`windowed_rate` (box sum over ``delta``) ->
:func:`normalize` (divide by the mean over ``norm_region``).

All lags are integer tick differences.  The raw histogram covers
``[0, max_lag)``; the windowed curve is reported at lags ``t`` whose whole window
``[t, t + delta)`` fits inside that range.  Simulator flags are never read.
"""
from __future__ import annotations

import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import NormalizationError, ValidationError
from .timetag import DEFAULT_CLOCK, ClockConfig

__all__ = [
    "AnalysisConfig",
    "DelayHistogram",
    "clean_mask",
    "clean_events",
    "delay_histogram",
    "single_group_delays",
    "window_sums",
    "windowed_rate",
    "normalize",
    "raw_histogram",
    "analyze_events",
    "single_group_histogram",
    "CoincidenceHistogrammer",
]


def _frac(x) -> Fraction:
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class AnalysisConfig:
    group1: tuple = ()
    group2: tuple = ()
    delta: float = 400.0  # ns, coincidence window
    delta_s: float = 150.0  # ns, spurious-coincidence window
    bin_width: float = 25.0  # ns
    max_lag: float = 1000.0  # ns
    norm_region: tuple = (500.0, 700.0)  # ns, inclusive
    single_group_mode: bool = False

    def __post_init__(self):
        g1 = tuple(int(p) for p in self.group1)
        g2 = tuple(int(p) for p in self.group2)
        object.__setattr__(self, "group1", g1)
        object.__setattr__(self, "group2", g2)
        object.__setattr__(self, "norm_region", tuple(float(x) for x in self.norm_region))
        if not g1:
            raise ValidationError("group1 must not be empty")
        if not self.single_group_mode:
            if not g2:
                raise ValidationError("group2 must not be empty unless single_group_mode")
            if set(g1) & set(g2):
                raise ValidationError("group1 and group2 overlap; set single_group_mode to analyze one group")
        if any(p < 0 or p > 65535 for p in g1 + g2):
            raise ValidationError("pixel indices must be in 0..65535")
        for name in ("delta", "delta_s", "bin_width", "max_lag"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if _frac(self.delta) % _frac(self.bin_width):
            raise ValidationError("delta must be an integer multiple of bin_width")
        if self.delta > self.max_lag:
            raise ValidationError("delta must not exceed max_lag")
        lo, hi = self.norm_region
        if not 0 <= lo <= hi <= self.max_lag:
            raise ValidationError("norm_region must satisfy 0 <= lo <= hi <= max_lag")

    @property
    def n_bins(self) -> int:
        return math.ceil(_frac(self.max_lag) / _frac(self.bin_width))

    @property
    def window_bins(self) -> int:
        return int(_frac(self.delta) / _frac(self.bin_width))

    @property
    def lag_grid(self) -> np.ndarray:
        """Left edges of the windowed-curve lags."""
        n = self.n_bins - self.window_bins + 1
        return np.arange(n) * self.bin_width

    def echo(self) -> dict:
        d = asdict(self)
        d["group1"] = list(self.group1)
        d["group2"] = list(self.group2)
        d["norm_region"] = list(self.norm_region)
        return d


def _group_codes(pixels: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    lut = np.zeros(65536, dtype=np.int8)
    lut[list(cfg.group1)] = 1
    if not cfg.single_group_mode:
        lut[list(cfg.group2)] = 2
    return lut[pixels]


def _ticks_within(span_ns: float, clock: ClockConfig) -> int:
    """Largest tick difference whose duration is <= span_ns."""
    return math.floor(_frac(span_ns) / clock.tick_period_ns)


def _vetoed(times: np.ndarray, outside: np.ndarray, ds: int) -> np.ndarray:
    if outside.shape[0] == 0 or times.shape[0] == 0:
        return np.zeros(times.shape[0], dtype=bool)
    j = np.searchsorted(outside, times - ds, side="left")
    inside = j < outside.shape[0]
    hit = np.zeros(times.shape[0], dtype=bool)
    hit[inside] = outside[j[inside]] <= times[inside] + ds
    return hit


def _dedup(times: np.ndarray, ds: int) -> np.ndarray:
    keep = np.ones(times.shape[0], dtype=bool)
    if times.shape[0] > 1:
        keep[1:] = np.diff(times) > ds
    return keep


def clean_mask(events: np.ndarray, cfg: AnalysisConfig, clock: ClockConfig = DEFAULT_CLOCK):
    """Boolean masks over ``events`` selecting the surviving D1 and D2 events.

    Veto: a group event within ``delta_s`` (either side) of any event on a pixel
    outside both groups is dropped.  Dedup (not in single-group mode): within a
    group, events chained by gaps ``<= delta_s`` collapse to the earliest one.
    """
    ticks = events["tick"].astype(np.int64)
    code = _group_codes(events["pixel"], cfg)
    ds = _ticks_within(cfg.delta_s, clock)
    outside = ticks[code == 0]
    masks = []
    for g in (1, 2):
        idx = np.flatnonzero(code == g)
        idx = idx[~_vetoed(ticks[idx], outside, ds)]
        if not cfg.single_group_mode:
            idx = idx[_dedup(ticks[idx], ds)]
        m = np.zeros(events.shape[0], dtype=bool)
        m[idx] = True
        masks.append(m)
    return masks[0], masks[1]


def clean_events(events: np.ndarray, cfg: AnalysisConfig, clock: ClockConfig = DEFAULT_CLOCK):
    """Cleaned ``(d1, d2)`` tick arrays (``int64``)."""
    m1, m2 = clean_mask(events, cfg, clock)
    ticks = events["tick"].astype(np.int64)
    return ticks[m1], ticks[m2]


def _lag_binning(cfg: AnalysisConfig, clock: ClockConfig):
    p, bw = clock.tick_period_ns, _frac(cfg.bin_width)
    max_ticks = math.ceil(_frac(cfg.max_lag) / p)
    ratio = p / bw
    return max_ticks, ratio.numerator, ratio.denominator


@njit(cache=True)
def _cross_hist(d1, d2, max_ticks, num, den, nbins):
    hist = np.zeros(nbins, dtype=np.int64)
    n2 = d2.shape[0]
    j0 = 0
    for i in range(d1.shape[0]):
        t1 = d1[i]
        while j0 < n2 and d2[j0] < t1:
            j0 += 1
        j = j0
        while j < n2:
            lag = d2[j] - t1
            if lag >= max_ticks:
                break
            hist[(lag * num) // den] += 1
            j += 1
    return hist


@njit(cache=True)
def _distinct_pixel_hist(t, pix, max_ticks, num, den, nbins):
    hist = np.zeros(nbins, dtype=np.int64)
    n = t.shape[0]
    for i in range(n):
        j = i + 1
        while j < n:
            lag = t[j] - t[i]
            if lag >= max_ticks:
                break
            if pix[j] != pix[i]:
                hist[(lag * num) // den] += 1
            j += 1
    return hist


def delay_histogram(d1, d2, cfg: AnalysisConfig, clock: ClockConfig = DEFAULT_CLOCK) -> np.ndarray:
    """Raw start-stop counts: every pair with ``0 <= t2 - t1 < max_lag``, binned by lag."""
    max_ticks, num, den = _lag_binning(cfg, clock)
    d1 = np.ascontiguousarray(d1, dtype=np.int64)
    d2 = np.ascontiguousarray(d2, dtype=np.int64)
    return _cross_hist(d1, d2, max_ticks, num, den, cfg.n_bins)


def single_group_delays(ticks, pixels, cfg: AnalysisConfig, clock: ClockConfig = DEFAULT_CLOCK) -> np.ndarray:
    """Raw counts over pairs of events on *distinct* pixels of one group (earlier = start)."""
    max_ticks, num, den = _lag_binning(cfg, clock)
    return _distinct_pixel_hist(
        np.ascontiguousarray(ticks, dtype=np.int64),
        np.ascontiguousarray(pixels, dtype=np.int64),
        max_ticks,
        num,
        den,
        cfg.n_bins,
    )


def window_sums(raw, window_bins: int) -> np.ndarray:
    """``out[i] = raw[i] + ... + raw[i + window_bins - 1]`` for every full window."""
    raw = np.asarray(raw)
    if window_bins < 1 or window_bins > raw.shape[0]:
        raise ValidationError("window must span between 1 bin and the whole histogram")
    c = np.concatenate(([0], np.cumsum(raw)))
    return c[window_bins:] - c[:-window_bins]


def windowed_rate(raw, delta: float, bin_width: float) -> np.ndarray:
    """Box average of the raw counts over ``[t, t + delta)`` on the lag grid."""
    k = _frac(delta) / _frac(bin_width)
    if k.denominator != 1:
        raise ValidationError(f"delta={delta} is not an integer multiple of bin_width={bin_width}")
    return window_sums(raw, int(k)) / int(k)


@dataclass
class DelayHistogram:
    """Windowed coincidence curve on the lag grid ``t_ns``.

    ``counts`` are the coincidences collected in ``[t, t + delta)``; ``c_norm`` the
    curve divided by its mean over the normalization region; ``err = sqrt(counts)``
    on the same scale.
    """

    t_ns: np.ndarray
    counts: np.ndarray
    c_norm: np.ndarray
    err: np.ndarray
    config: AnalysisConfig | None = None
    raw: np.ndarray | None = None
    norm_level: float = float("nan")
    metadata: dict = field(default_factory=dict)

    @property
    def bin_edges(self) -> np.ndarray:
        bw = self.config.bin_width if self.config is not None else (
            self.t_ns[1] - self.t_ns[0] if self.t_ns.shape[0] > 1 else 1.0)
        return np.append(self.t_ns, self.t_ns[-1] + bw) if self.t_ns.shape[0] else np.zeros(1)

    def flatness_chi2(self) -> tuple[float, int]:
        ok = self.err > 0
        return float(np.sum(((self.c_norm[ok] - 1.0) / self.err[ok]) ** 2)), int(ok.sum())

    def to_csv(self, fh, extra: dict | None = None) -> None:
        meta = {}
        if self.config is not None:
            meta.update({f"analysis.{k}": v for k, v in self.config.echo().items()})
        meta.update(self.metadata)
        meta.update(extra or {})
        meta["norm_level"] = self.norm_level
        for k, v in meta.items():
            fh.write(f"# {k} = {v}\n")
        fh.write("t_ns,counts,c_norm,err\n")
        for row in zip(self.t_ns, self.counts, self.c_norm, self.err):
            fh.write("{!r},{},{!r},{!r}\n".format(float(row[0]), int(row[1]), float(row[2]), float(row[3])))

    def to_csv_string(self, extra: dict | None = None) -> str:
        buf = io.StringIO()
        self.to_csv(buf, extra)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, fh) -> "DelayHistogram":
        meta, rows, header = {}, [], None
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
                continue
            if header is None:
                header = [h.strip() for h in line.split(",")]
                if header != ["t_ns", "counts", "c_norm", "err"]:
                    raise ValidationError(f"unexpected histogram columns {header}")
                continue
            rows.append([float(x) for x in line.split(",")])
        if header is None:
            raise ValidationError("histogram CSV has no column header")
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        level = float(meta.pop("norm_level", "nan"))
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], norm_level=level, metadata=meta)


def normalize(curve, cfg: AnalysisConfig, raw=None) -> DelayHistogram:
    """Divide the windowed curve by its mean over ``cfg.norm_region`` (inclusive).

    Errors are Poisson on the window sums: ``sqrt(curve * k) / (k * mean)`` with
    ``k = delta / bin_width``.
    """
    curve = np.asarray(curve, dtype=float)
    k = cfg.window_bins
    t = np.arange(curve.shape[0]) * cfg.bin_width
    lo, hi = cfg.norm_region
    region = (t >= lo) & (t <= hi)
    nonzero = region & (curve > 0)
    if nonzero.sum() < 3:
        raise NormalizationError(
            f"normalization region [{lo}, {hi}] ns holds {int(nonzero.sum())} non-empty bins; need >= 3"
        )
    level = float(curve[region].mean())
    counts = curve * k
    return DelayHistogram(
        t_ns=t,
        counts=np.rint(counts).astype(np.int64) if np.allclose(counts, np.rint(counts)) else counts,
        c_norm=curve / level,
        err=np.sqrt(counts) / (k * level),
        config=cfg,
        raw=None if raw is None else np.asarray(raw),
        norm_level=level,
    )


def _unnormalized(curve, cfg: AnalysisConfig, raw) -> DelayHistogram:
    k = cfg.window_bins
    t = np.arange(curve.shape[0]) * cfg.bin_width
    z = np.zeros(curve.shape[0])
    return DelayHistogram(t, np.rint(curve * k).astype(np.int64), z, z.copy(), cfg, np.asarray(raw))


def _safe_splits(ticks: np.ndarray, chunk: int, gap: int) -> list[int]:
    """Split points where the stream has a quiet gap longer than ``gap`` ticks.

    No pair, veto or dedup chain can straddle such a gap.
    """
    n = ticks.shape[0]
    cuts = [0]
    pos = chunk
    while pos < n:
        found = None
        look = 4096
        while found is None and pos < n:
            seg = ticks[pos - 1: min(n, pos + look)].astype(np.int64)
            big = np.flatnonzero(np.diff(seg) > gap)
            if big.size:
                found = pos + int(big[0])
            else:
                pos += look
                look *= 2
        if found is None:
            break
        cuts.append(found)
        pos = found + chunk
    cuts.append(n)
    return cuts


def _raw_chunk(events: np.ndarray, cfg: AnalysisConfig, clock: ClockConfig) -> np.ndarray:
    m1, m2 = clean_mask(events, cfg, clock)
    ticks = events["tick"].astype(np.int64)
    if cfg.single_group_mode:
        return single_group_delays(ticks[m1], events["pixel"][m1], cfg, clock)
    return delay_histogram(ticks[m1], ticks[m2], cfg, clock)


def raw_histogram(
    events: np.ndarray,
    cfg: AnalysisConfig,
    clock: ClockConfig = DEFAULT_CLOCK,
    n_threads: int = 1,
    chunk_events: int = 1 << 20,
) -> np.ndarray:
    """Cleaned raw delay counts, computed chunk-wise and summed bin by bin.

    The result does not depend on ``n_threads`` or ``chunk_events``.
    """
    if events.shape[0] == 0:
        return np.zeros(cfg.n_bins, dtype=np.int64)
    gap = max(math.ceil(_frac(cfg.max_lag) / clock.tick_period_ns), _ticks_within(cfg.delta_s, clock)) + 1
    cuts = _safe_splits(events["tick"], chunk_events, gap)
    spans = list(zip(cuts[:-1], cuts[1:]))

    def work(span):
        a, b = span
        return _raw_chunk(np.ascontiguousarray(events[a:b]), cfg, clock)

    total = np.zeros(cfg.n_bins, dtype=np.int64)
    if n_threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            for part in pool.map(work, spans):
                total += part
    else:
        for span in spans:
            total += work(span)
    return total


def analyze_events(
    events: np.ndarray,
    cfg: AnalysisConfig,
    clock: ClockConfig = DEFAULT_CLOCK,
    n_threads: int = 1,
    allow_empty: bool = False,
) -> DelayHistogram:
    """Clean, histogram, window and normalize one event stream.

    The clock period is recorded as ``metadata["tick_period_ns"]``: lags are
    tick differences, which the fit needs to know.
    """
    raw = raw_histogram(events, cfg, clock, n_threads)
    return _finish(raw, cfg, clock, allow_empty)


def _finish(raw, cfg: AnalysisConfig, clock: ClockConfig, allow_empty: bool) -> DelayHistogram:
    curve = windowed_rate(raw, cfg.delta, cfg.bin_width)
    try:
        hist = normalize(curve, cfg, raw)
    except NormalizationError:
        if not allow_empty:
            raise
        warnings.warn("normalization region is empty; writing an unnormalized histogram", RuntimeWarning)
        hist = _unnormalized(curve, cfg, raw)
    hist.metadata["tick_period_ns"] = str(clock.tick_period_ns)
    return hist


def single_group_histogram(events: np.ndarray, cfg: AnalysisConfig, clock: ClockConfig = DEFAULT_CLOCK) -> DelayHistogram:
    """Coincidences within one pixel group; pairs must sit on distinct pixels."""
    if not cfg.single_group_mode:
        raise ValidationError("single_group_histogram needs single_group_mode=True")
    return analyze_events(events, cfg, clock)


class CoincidenceHistogrammer(BaseEstimator):
    """Estimator wrapper around the analysis chain.

    ``fit`` builds the histogram from one event stream; ``partial_fit`` adds the
    raw counts of further streams (e.g. independent acquisition cycles) before a
    single final normalization.

    Attributes
    ----------
    raw_counts_ : ndarray
        Summed raw delay counts.
    histogram_ : DelayHistogram
        Windowed, normalized curve for everything seen so far.
    """

    def __init__(
        self,
        group1=(),
        group2=(),
        delta_ns=400.0,
        delta_s_ns=150.0,
        bin_width_ns=25.0,
        max_lag_ns=1000.0,
        norm_region_ns=(500.0, 700.0),
        single_group_mode=False,
        tick_period_ns=25,
        n_threads=1,
    ):
        self.group1 = group1
        self.group2 = group2
        self.delta_ns = delta_ns
        self.delta_s_ns = delta_s_ns
        self.bin_width_ns = bin_width_ns
        self.max_lag_ns = max_lag_ns
        self.norm_region_ns = norm_region_ns
        self.single_group_mode = single_group_mode
        self.tick_period_ns = tick_period_ns
        self.n_threads = n_threads

    @classmethod
    def from_config(cls, cfg: AnalysisConfig, clock: ClockConfig = DEFAULT_CLOCK, **kw):
        return cls(
            group1=cfg.group1,
            group2=cfg.group2,
            delta_ns=cfg.delta,
            delta_s_ns=cfg.delta_s,
            bin_width_ns=cfg.bin_width,
            max_lag_ns=cfg.max_lag,
            norm_region_ns=cfg.norm_region,
            single_group_mode=cfg.single_group_mode,
            tick_period_ns=clock.tick_period_ns,
            **kw,
        )

    def _config(self) -> AnalysisConfig:
        return AnalysisConfig(
            group1=self.group1,
            group2=self.group2,
            delta=self.delta_ns,
            delta_s=self.delta_s_ns,
            bin_width=self.bin_width_ns,
            max_lag=self.max_lag_ns,
            norm_region=self.norm_region_ns,
            single_group_mode=self.single_group_mode,
        )

    def fit(self, events, y=None):
        for attr in ("raw_counts_", "config_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(events)

    def partial_fit(self, events, y=None):
        cfg = self._config()
        clock = ClockConfig(self.tick_period_ns)
        raw = raw_histogram(events, cfg, clock, self.n_threads)
        if hasattr(self, "raw_counts_"):
            self.raw_counts_ = self.raw_counts_ + raw
        else:
            self.raw_counts_ = raw
        self.config_ = cfg
        self.histogram_ = _finish(self.raw_counts_, cfg, clock, allow_empty=False)
        return self

    def transform(self, events):
        """Normalized curve of ``events`` alone, with the fitted configuration."""
        check_is_fitted(self, "config_")
        clock = ClockConfig(self.tick_period_ns)
        return analyze_events(events, self.config_, clock, self.n_threads).c_norm
