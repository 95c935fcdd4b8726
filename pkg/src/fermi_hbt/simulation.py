"""Whole-run simulation: beam generator plus detector chain, one acquisition period at a time.

Period ``k`` covers beam time ``[k P, (k+1) P)`` with ``P`` = cycle length plus
dead time, and draws all of its randomness from chunk ``k`` of the run seed, so
periods can be computed in any order or in parallel.  Detection delays and
cross-talk jitter can push events past the end of a period; those are held
back and merged into the next period's events, so the concatenated output is
one globally sorted stream.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .beam import BeamConfig, generate_stream
from .detector import (
    DetectorConfig,
    apply_duty_cycle,
    apply_response,
    inject_background,
    inject_crosstalk,
)
from .timetag import FLAG_BACKGROUND, FLAG_CROSSTALK, EVENT_DTYPE, merge_streams, ns_to_ticks, write_run

__all__ = ["SimulationSummary", "simulate_periods", "simulate_events", "simulate_to_file"]


@dataclass
class SimulationSummary:
    duration_s: float = 0.0
    live_time_s: float = 0.0
    beam_arrivals: int = 0
    crosstalk_events: int = 0
    background_events: int = 0
    dead_time_losses: int = 0
    events: int = 0

    @property
    def realized_rate(self) -> float:
        """Beam arrivals per second of beam time."""
        return self.beam_arrivals / self.duration_s if self.duration_s > 0 else 0.0

    @property
    def detected_rate(self) -> float:
        """Recorded events per second of live time."""
        return self.events / self.live_time_s if self.live_time_s > 0 else 0.0

    @property
    def dead_time_fraction(self) -> float:
        before = self.events + self.dead_time_losses
        return self.dead_time_losses / before if before else 0.0

    def as_dict(self) -> dict:
        return {
            "events": self.events,
            "beam_arrivals": self.beam_arrivals,
            "realized_rate_per_s": self.realized_rate,
            "detected_rate_per_s": self.detected_rate,
            "crosstalk_events": self.crosstalk_events,
            "background_events": self.background_events,
            "dead_time_losses": self.dead_time_losses,
            "dead_time_fraction": self.dead_time_fraction,
            "duration_s": self.duration_s,
            "live_time_s": self.live_time_s,
        }


def _live_ns(start: int, stop: int, det: DetectorConfig) -> int:
    """Live nanoseconds inside ``[start, stop)`` for a period-aligned ``start``."""
    return min(stop - start, det.cycle_length_ns)


def _period(k: int, beam: BeamConfig, det: DetectorConfig, span_ns: int):
    start = k * det.period_ns
    stop = min(start + det.period_ns, span_ns)
    times = generate_stream(replace(beam, duration=(stop - start) * 1e-9), offset_ns=start, chunk=k)
    events = apply_response(times, det, beam.seed, k)
    events = inject_crosstalk(events, det.crosstalk, beam.seed, det.grid, det.clock, k)
    events = inject_background(events, det.dark_rate, det, beam.seed, start, stop, k)
    kept = apply_duty_cycle(events, det.cycle_length_ns, det.dead_time_ns, det.clock)
    flags = kept["flags"]
    stats = (
        times.shape[0],
        int(np.count_nonzero(flags == FLAG_CROSSTALK)),
        int(np.count_nonzero(flags == FLAG_BACKGROUND)),
        events.shape[0] - kept.shape[0],
        _live_ns(start, stop, det),
    )
    return kept, stats


def simulate_periods(beam: BeamConfig, det: DetectorConfig, n_threads: int = 1, summary: SimulationSummary | None = None):
    """Yield sorted event chunks whose concatenation is the whole run.

    Statistics accumulate into ``summary`` as chunks are produced.  Output is
    the same for every ``n_threads``.
    """
    span_ns = int(round(beam.duration * 1e9))
    n_periods = -(-span_ns // det.period_ns) if span_ns > 0 else 0
    if summary is not None:
        summary.duration_s = beam.duration

    def work(k):
        return _period(k, beam, det, span_ns)

    carry = np.empty(0, dtype=EVENT_DTYPE)
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        results = pool.map(work, range(n_periods)) if pool else map(work, range(n_periods))
        for k, (events, stats) in enumerate(results):
            if summary is not None:
                summary.beam_arrivals += stats[0]
                summary.crosstalk_events += stats[1]
                summary.background_events += stats[2]
                summary.dead_time_losses += stats[3]
                summary.live_time_s += stats[4] * 1e-9
                summary.events += events.shape[0]
            events = merge_streams([carry, events]) if carry.shape[0] else events
            if k + 1 < n_periods:
                # later periods start no earlier than this boundary
                boundary = ns_to_ticks((k + 1) * det.period_ns, det.clock)
                cut = int(np.searchsorted(events["tick"], np.uint64(boundary), side="left"))
                events, carry = events[:cut], events[cut:]
            yield events
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)


def simulate_events(beam: BeamConfig, det: DetectorConfig, n_threads: int = 1) -> tuple[np.ndarray, SimulationSummary]:
    """Whole run in memory."""
    summary = SimulationSummary()
    chunks = list(simulate_periods(beam, det, n_threads, summary))
    events = np.concatenate(chunks) if chunks else np.empty(0, dtype=EVENT_DTYPE)
    return events, summary


def simulate_to_file(path, beam: BeamConfig, det: DetectorConfig, meta, n_threads: int = 1) -> SimulationSummary:
    """Stream the run straight into an NTT1 file."""
    summary = SimulationSummary()
    write_run(path, meta, simulate_periods(beam, det, n_threads, summary))
    return summary
