"""Run configuration: ``[beam]``, ``[detector]``, ``[analysis]`` and ``[fit]`` sections.

Files are flat ``key = value`` text with ``[section]`` headers, read with
:mod:`configparser`.  Units are part of every key name (``_ns``, ``_s``,
``_ms``, ``_per_s``, ``_mm``).  Unknown sections or keys are rejected, and each
section is validated by constructing the owning module's dataclass before any
work starts.  ``load_config("in10")`` and ``load_config("t13c")`` read the
bundled presets.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .beam import BeamConfig, CorrelationModel
from .coincidence import AnalysisConfig
from .detector import CrosstalkModel, DetectorConfig, PixelGrid, ScintillatorModel
from .exceptions import ConfigError, ValidationError
from .timetag import ClockConfig, RunMetadata

__all__ = ["FitOptions", "RunConfig", "load_config", "parse_config", "preset_names", "PRESETS"]

PRESETS = ("in10", "t13c")


def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"{text!r} is not finite")
    return v


def _int(text):
    return int(text, 10)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _int_list(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _float_list(text):
    return tuple(_float(x) for x in text.replace(",", " ").split())


def _auto_float(text):
    return None if text.strip().lower() == "auto" else _float(text)


def _illumination(text):
    return None if text.strip().lower() == "uniform" else _float_list(text)


# section -> key -> (parser, default as written in a file)
SCHEMA = {
    "beam": {
        "rate_per_s": (_float, "3000"),
        "alpha": (_float, "1"),
        "tau_c_ns": (_float, "120"),
        "duration_s": (_float, "10"),
        "seed": (_int, "0"),
        "source_label": (str, ""),
    },
    "detector": {
        "rows": (_int, "8"),
        "cols": (_int, "8"),
        "pixel_size_mm": (_float, "5.8"),
        "illumination": (_illumination, "uniform"),
        "illuminated_pixels": (_int_list, ""),
        "decay_time_ns": (_float, "250"),
        "mean_capture_ns": (_float, "100"),
        "max_travel_ns": (_float, "300"),
        "rms_total_ns": (_float, "140"),
        "decay_delay_mean_ns": (_float, "100"),
        "crosstalk_probability": (_float, "0"),
        "crosstalk_jitter_ns": (_float, "150"),
        "crosstalk_neighbors": (str, "adjacent"),
        "dark_rate_per_s": (_float, "0"),
        "tick_period_ns": (str, "25"),
        "cycle_length_s": (_float, "10"),
        "dead_time_ms": (_float, "10"),
    },
    "analysis": {
        "group1": (_int_list, ""),
        "group2": (_int_list, ""),
        "delta_ns": (_float, "400"),
        "delta_s_ns": (_float, "150"),
        "bin_width_ns": (_float, "25"),
        "max_lag_ns": (_float, "1000"),
        "norm_region_ns": (_float_list, "500, 700"),
        "single_group_mode": (_bool, "false"),
    },
    "fit": {
        "tau_t_ns": (_auto_float, "auto"),
        "delta_ns": (_auto_float, "auto"),
        "lag_offset_ns": (_auto_float, "auto"),
        "alpha_init": (_float, "0.5"),
        "tau_c_init_ns": (_float, "100"),
        "baseline_init": (_float, "1"),
        "max_iter": (_int, "200"),
        "gtol": (_float, "1e-8"),
        "xtol": (_float, "1e-10"),
        "decimate": (_int, "1"),
        "fallback": (_bool, "false"),
        "multistart": (_bool, "true"),
    },
}


@dataclass(frozen=True)
class FitOptions:
    tau_t: float | None = None  # ns; None = calibrated from the detector model
    delta: float | None = None  # ns; None = analysis window
    lag_offset: float | None = None  # ns; None = minus half a clock tick
    init: tuple = (0.5, 100.0, 1.0)
    max_iter: int = 200
    gtol: float = 1e-8
    xtol: float = 1e-10
    decimate: int = 1
    fallback: bool = False
    multistart: bool = True

    def __post_init__(self):
        if self.tau_t is not None and self.tau_t < 0:
            raise ValidationError("tau_t must be >= 0")
        if self.delta is not None and not self.delta > 0:
            raise ValidationError("delta must be > 0")
        if self.lag_offset is not None and not math.isfinite(self.lag_offset):
            raise ValidationError("lag_offset must be finite")
        if self.max_iter < 1 or self.decimate < 1:
            raise ValidationError("max_iter and decimate must be >= 1")
        if not (self.gtol > 0 and self.xtol > 0):
            raise ValidationError("gtol and xtol must be > 0")

    def kwargs(self) -> dict:
        return dict(
            lag_offset=self.lag_offset,
            init=self.init,
            max_iter=self.max_iter,
            gtol=self.gtol,
            xtol=self.xtol,
            decimate=self.decimate,
            fallback=self.fallback,
            multistart=self.multistart,
        )


@dataclass(frozen=True)
class RunConfig:
    beam: BeamConfig
    detector: DetectorConfig
    analysis: AnalysisConfig
    fit: FitOptions = field(default_factory=FitOptions)
    source_label: str = ""
    values: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def tau_t(self) -> float:
        """Broadening width used by the fit: the configured value or the detector calibration."""
        if self.fit.tau_t is not None:
            return self.fit.tau_t
        return self.detector.scintillator.kernel_tau_t

    @property
    def delta(self) -> float:
        return self.fit.delta if self.fit.delta is not None else self.analysis.delta

    def metadata(self) -> RunMetadata:
        return RunMetadata(
            clock=self.detector.clock,
            pixel_count=self.detector.grid.n_pixels,
            cycle_length_ns=self.detector.cycle_length_ns,
            dead_time_ns=self.detector.dead_time_ns,
            seed=self.beam.seed,
            source_label=self.source_label,
        )

    def echo(self) -> dict:
        """Every key with its effective value, as strings, section by section."""
        return {sec: dict(keys) for sec, keys in self.values.items()}

    def to_text(self) -> str:
        lines = []
        for sec, keys in self.values.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)


def _read_section(parser, section):
    raw = dict(parser.items(section)) if parser.has_section(section) else {}
    schema = SCHEMA[section]
    for key in raw:
        if key not in schema:
            raise ConfigError("unknown key", section, key)
    parsed, text = {}, {}
    for key, (conv, default) in schema.items():
        value = raw.get(key, default).strip()
        text[key] = value
        try:
            parsed[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r}: {exc}", section, key) from None
    return parsed, text


def _build(section, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc), section) from None


def _ns(value_s: float, unit: float, section: str, key: str) -> int:
    ns = value_s * unit
    if ns != round(ns):
        raise ConfigError(f"{value_s} does not resolve to whole nanoseconds", section, key)
    return int(round(ns))


def _detector(d) -> DetectorConfig:
    grid = PixelGrid(d["rows"], d["cols"], d["pixel_size_mm"])
    illumination = d["illumination"]
    if d["illuminated_pixels"]:
        if illumination is not None:
            raise ConfigError("set either illumination or illuminated_pixels", "detector")
        weights = [0.0] * grid.n_pixels
        for p in d["illuminated_pixels"]:
            if not 0 <= p < grid.n_pixels:
                raise ConfigError(f"pixel {p} outside the {grid.n_pixels}-pixel grid", "detector", "illuminated_pixels")
            weights[p] = 1.0
        illumination = tuple(weights)
    return DetectorConfig(
        grid=grid,
        illumination=illumination,
        scintillator=ScintillatorModel(
            decay_time=d["decay_time_ns"],
            mean_capture=d["mean_capture_ns"],
            max_travel=d["max_travel_ns"],
            rms_total=d["rms_total_ns"],
            decay_delay_mean=d["decay_delay_mean_ns"],
        ),
        crosstalk=CrosstalkModel(d["crosstalk_probability"], d["crosstalk_jitter_ns"], d["crosstalk_neighbors"]),
        dark_rate=d["dark_rate_per_s"],
        clock=ClockConfig(d["tick_period_ns"]),
        cycle_length_ns=_ns(d["cycle_length_s"], 1e9, "detector", "cycle_length_s"),
        dead_time_ns=_ns(d["dead_time_ms"], 1e6, "detector", "dead_time_ms"),
    )


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError("unknown section", section)
    values, text_values = {}, {}
    for section in SCHEMA:
        values[section], text_values[section] = _read_section(parser, section)

    b, d, a, f = (values[s] for s in ("beam", "detector", "analysis", "fit"))
    beam = _build(
        "beam",
        lambda: BeamConfig(
            rate=b["rate_per_s"],
            duration=b["duration_s"],
            model=CorrelationModel(b["alpha"], b["tau_c_ns"]),
            seed=b["seed"],
        ),
    )
    detector = _build("detector", lambda: _detector(d))
    analysis = _build(
        "analysis",
        lambda: AnalysisConfig(
            group1=a["group1"],
            group2=a["group2"],
            delta=a["delta_ns"],
            delta_s=a["delta_s_ns"],
            bin_width=a["bin_width_ns"],
            max_lag=a["max_lag_ns"],
            norm_region=a["norm_region_ns"],
            single_group_mode=a["single_group_mode"],
        ),
    )
    n = detector.grid.n_pixels
    for key in ("group1", "group2"):
        bad = [p for p in getattr(analysis, key) if p >= n]
        if bad:
            raise ConfigError(f"pixels {bad} outside the {n}-pixel grid", "analysis", key)
    if len(a["norm_region_ns"]) != 2:
        raise ConfigError("expected two values: lo, hi", "analysis", "norm_region_ns")
    fit = _build(
        "fit",
        lambda: FitOptions(
            tau_t=f["tau_t_ns"],
            delta=f["delta_ns"],
            lag_offset=f["lag_offset_ns"],
            init=(f["alpha_init"], f["tau_c_init_ns"], f["baseline_init"]),
            max_iter=f["max_iter"],
            gtol=f["gtol"],
            xtol=f["xtol"],
            decimate=f["decimate"],
            fallback=f["fallback"],
            multistart=f["multistart"],
        ),
    )
    return RunConfig(beam, detector, analysis, fit, b["source_label"], text_values)


def preset_names() -> tuple:
    return PRESETS


def load_config(source) -> RunConfig:
    """Read a config file, or a bundled preset when ``source`` is a preset name."""
    name = str(source)
    if name in PRESETS and not Path(name).exists():
        text = resources.files("fermi_hbt.presets").joinpath(f"{name}.cfg").read_text()
    else:
        text = Path(source).read_text()
    return parse_config(text)
