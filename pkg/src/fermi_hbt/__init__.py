"""Simulation and analysis of fermionic antibunching in time-tagged neutron detection.

Pipeline: :mod:`~fermi_hbt.beam` generates correlated arrival times,
:mod:`~fermi_hbt.detector` turns them into pixel-tagged clock ticks,
:mod:`~fermi_hbt.coincidence` builds the normalized start-stop coincidence
curve, and :mod:`~fermi_hbt.fitting` fits the broadened model of
:mod:`~fermi_hbt.model` to it.  :mod:`~fermi_hbt.timetag` holds the event
layout and the NTT1 file format.
"""

__version__ = "0.1.0"

from .beam import BeamConfig, CorrelationModel, empirical_g2, generate_stream, g2_target
from .coincidence import (
    AnalysisConfig,
    CoincidenceHistogrammer,
    DelayHistogram,
    analyze_events,
    clean_events,
    delay_histogram,
    normalize,
    windowed_rate,
)
from .config import RunConfig, load_config
from .detector import CrosstalkModel, DetectorConfig, PixelGrid, ScintillatorModel, simulate_detector
from .exceptions import (
    ConfigError,
    DecodeError,
    FermiHBTError,
    NumericalError,
    QuadratureError,
    RegimeError,
    ValidationError,
)
from .fitting import BroadenedDipRegressor, FitResult, fit_curve, fit_histogram
from .model import BroadenedModel, c_exp_closed, c_exp_quadrature, coherence_to_energy, dip_depth, erf
from .simulation import simulate_events, simulate_to_file
from .timetag import (
    EVENT_DTYPE,
    ClockConfig,
    RunMetadata,
    decode_run,
    encode_run,
    merge_streams,
    ns_to_ticks,
    read_run,
    ticks_to_ns,
    write_run,
)

__all__ = [
    "AnalysisConfig",
    "BeamConfig",
    "BroadenedDipRegressor",
    "BroadenedModel",
    "ClockConfig",
    "CoincidenceHistogrammer",
    "ConfigError",
    "CorrelationModel",
    "CrosstalkModel",
    "DecodeError",
    "DelayHistogram",
    "DetectorConfig",
    "EVENT_DTYPE",
    "FermiHBTError",
    "FitResult",
    "NumericalError",
    "PixelGrid",
    "QuadratureError",
    "RegimeError",
    "RunConfig",
    "RunMetadata",
    "ScintillatorModel",
    "ValidationError",
    "analyze_events",
    "c_exp_closed",
    "c_exp_quadrature",
    "clean_events",
    "coherence_to_energy",
    "decode_run",
    "delay_histogram",
    "dip_depth",
    "empirical_g2",
    "encode_run",
    "erf",
    "fit_curve",
    "fit_histogram",
    "g2_target",
    "generate_stream",
    "load_config",
    "merge_streams",
    "normalize",
    "ns_to_ticks",
    "read_run",
    "simulate_detector",
    "simulate_events",
    "simulate_to_file",
    "ticks_to_ns",
    "windowed_rate",
    "write_run",
]
