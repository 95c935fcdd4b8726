"""Time-tagged event streams: clock arithmetic, merging and the NTT1 file format.

An event stream is a numpy structured array with dtype :data:`EVENT_DTYPE`
(``tick`` u64, ``pixel`` u16, ``flags`` u16; 12 bytes, no padding), sorted by
``(tick, pixel)``.  The packed layout is the NTT1 record layout, so encoding a
stream is a header plus ``events.tobytes()``.

``flags`` carries simulator ground truth (:data:`FLAG_REAL`,
:data:`FLAG_CROSSTALK`, :data:`FLAG_BACKGROUND`).  Analysis code never reads it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .exceptions import (
    BadMagicError,
    DecodeError,
    TruncatedRecordError,
    UnsortedPayloadError,
    UnsortedStreamError,
    ValidationError,
    VersionMismatchError,
)

__all__ = [
    "EVENT_DTYPE",
    "FLAG_REAL",
    "FLAG_CROSSTALK",
    "FLAG_BACKGROUND",
    "ClockConfig",
    "Event",
    "RunMetadata",
    "ns_to_ticks",
    "ticks_to_ns",
    "make_events",
    "as_events",
    "check_sorted",
    "sort_events",
    "merge_streams",
    "encode_run",
    "decode_run",
    "write_run",
    "read_run",
]

EVENT_DTYPE = np.dtype([("tick", "<u8"), ("pixel", "<u2"), ("flags", "<u2")])
assert EVENT_DTYPE.itemsize == 12

FLAG_REAL = 0
FLAG_CROSSTALK = 1
FLAG_BACKGROUND = 2

MAGIC = b"NTT1"
VERSION = 1
HEADER = struct.Struct("<4sIQHHQQI")
HEADER_SIZE = HEADER.size  # 40
RECORD_SIZE = EVENT_DTYPE.itemsize

_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1
_NS_PER_S = 10**9


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        # decimal reading: 0.1 ns means 1/10, not the nearest binary double
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class ClockConfig:
    """Digitizer clock.  The default is the 40 MHz / 25 ns acquisition clock."""

    tick_period_ns: Fraction = Fraction(25)

    def __post_init__(self):
        period = _as_fraction(self.tick_period_ns)
        if period <= 0:
            raise ValidationError(f"tick_period_ns must be > 0, got {period}")
        object.__setattr__(self, "tick_period_ns", period)

    @classmethod
    def from_frequency(cls, frequency_hz) -> "ClockConfig":
        f = _as_fraction(frequency_hz)
        if f <= 0:
            raise ValidationError(f"clock frequency must be > 0, got {f}")
        return cls(Fraction(_NS_PER_S) / f)

    @property
    def frequency_hz(self) -> Fraction:
        return Fraction(_NS_PER_S) / self.tick_period_ns

    @property
    def period(self) -> float:
        return float(self.tick_period_ns)


DEFAULT_CLOCK = ClockConfig()


class Event(NamedTuple):
    tick: int
    pixel: int


def ns_to_ticks(t, clock: ClockConfig = DEFAULT_CLOCK):
    """Quantize a time in ns to the clock tick containing it: ``floor(t / period)``.

    Scalars return a Python int, arrays a ``uint64`` array.
    """
    period = clock.tick_period_ns
    if np.ndim(t) == 0:
        if isinstance(t, np.generic):
            t = t.item()
        if isinstance(t, float) and not math.isfinite(t):
            raise ValidationError(f"time must be finite, got {t}")
        frac = t if isinstance(t, Fraction) else Fraction(t)
        if frac < 0:
            raise ValidationError(f"time must be >= 0, got {t}")
        return math.floor(frac / period)
    arr = np.asarray(t)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0):
        raise ValidationError("times must be finite and >= 0")
    if np.issubdtype(arr.dtype, np.integer) and period.denominator == 1:
        return (arr.astype(np.uint64) // np.uint64(period.numerator)).astype(np.uint64)
    return np.floor(arr / float(period)).astype(np.uint64)


def ticks_to_ns(n, clock: ClockConfig = DEFAULT_CLOCK):
    """Exact ``n * period``.  Integer-period clocks give ints (``uint64`` for arrays)."""
    period = clock.tick_period_ns
    if np.ndim(n) == 0:
        n = int(n)
        value = n * period
        if value < 0 or value > _U64_MAX:
            raise OverflowError(f"{n} ticks exceeds the 64-bit ns range")
        return value.numerator if value.denominator == 1 else value
    arr = np.asarray(n)
    if arr.size == 0:
        return arr.astype(np.uint64)
    hi = int(arr.max())
    if int(arr.min()) < 0 or hi * period > _U64_MAX:
        raise OverflowError("tick values exceed the 64-bit ns range")
    if period.denominator == 1:
        return arr.astype(np.uint64) * np.uint64(period.numerator)
    return arr.astype(np.float64) * float(period)


def make_events(ticks, pixels, flags=None) -> np.ndarray:
    ticks = np.asarray(ticks)
    pixels = np.asarray(pixels)
    if ticks.shape != pixels.shape or ticks.ndim != 1:
        raise ValidationError("ticks and pixels must be 1-D arrays of equal length")
    out = np.empty(ticks.shape[0], dtype=EVENT_DTYPE)
    out["tick"] = ticks
    out["pixel"] = pixels
    out["flags"] = 0 if flags is None else flags
    return out


def as_events(obj) -> np.ndarray:
    """Coerce an event array or a sequence of ``(tick, pixel[, flags])`` tuples."""
    if isinstance(obj, np.ndarray) and obj.dtype.names is not None:
        if obj.dtype == EVENT_DTYPE:
            return obj
        flags = obj["flags"] if "flags" in obj.dtype.names else None
        return make_events(obj["tick"], obj["pixel"], flags)
    rows = list(obj)
    out = np.zeros(len(rows), dtype=EVENT_DTYPE)
    for i, row in enumerate(rows):
        out[i] = tuple(row) + (0,) * (3 - len(row))
    return out


def _first_unsorted(events: np.ndarray, chunk: int = 1 << 22) -> int | None:
    n = events.shape[0]
    start = 0
    while start < n - 1:
        stop = min(n, start + chunk + 1)
        tick = events["tick"][start:stop]
        pix = events["pixel"][start:stop]
        later = tick[1:] > tick[:-1]
        equal = tick[1:] == tick[:-1]
        ok = later | (equal & (pix[1:] >= pix[:-1]))
        if not ok.all():
            return start + int(np.argmin(ok)) + 1
        start = stop - 1
    return None


def check_sorted(events: np.ndarray, stream=0) -> None:
    """Raise :class:`UnsortedStreamError` unless sorted by ``(tick, pixel)``."""
    pos = _first_unsorted(events)
    if pos is not None:
        raise UnsortedStreamError(stream, pos)


def sort_events(events: np.ndarray) -> np.ndarray:
    """Stable sort by ``(tick, pixel)``."""
    if events.shape[0] < 2:
        return events.copy()
    order = np.lexsort((events["pixel"], events["tick"]))
    return events[order]


def merge_streams(streams: Sequence) -> np.ndarray:
    """Merge individually sorted streams into one stream sorted by ``(tick, pixel)``.

    Stable: equal ``(tick, pixel)`` keys keep their input-stream order.
    """
    arrays = [as_events(s) for s in streams]
    for i, arr in enumerate(arrays):
        check_sorted(arr, stream=i)
    nonempty = [a for a in arrays if a.shape[0]]
    if not nonempty:
        return np.empty(0, dtype=EVENT_DTYPE)
    if len(nonempty) == 1:
        return nonempty[0].copy()
    return sort_events(np.concatenate(nonempty))


@dataclass(frozen=True)
class RunMetadata:
    """Acquisition-run description stored in the NTT1 header.

    ``source_label`` is not part of the binary header and decodes as ``""``.
    """

    clock: ClockConfig = field(default_factory=ClockConfig)
    pixel_count: int = 64
    cycle_length_ns: int = 10 * _NS_PER_S
    dead_time_ns: int = 10_000_000
    seed: int = 0
    source_label: str = ""

    def __post_init__(self):
        if not 0 < self.pixel_count <= 65535:
            raise ValidationError(f"pixel_count must be in 1..65535, got {self.pixel_count}")
        if not 0 < self.cycle_length_ns <= _U64_MAX:
            raise ValidationError("cycle_length must be > 0")
        if not 0 <= self.dead_time_ns <= _U32_MAX:
            raise ValidationError("dead_time must be >= 0 and fit in 32 bits of ns")
        if not 0 <= self.seed <= _U64_MAX:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def cycle_length_s(self) -> float:
        return self.cycle_length_ns / _NS_PER_S

    @property
    def dead_time_ms(self) -> float:
        return self.dead_time_ns / 1e6

    @property
    def duty_fraction(self) -> float:
        return self.cycle_length_ns / (self.cycle_length_ns + self.dead_time_ns)


def _pack_header(meta: RunMetadata) -> bytes:
    freq = meta.clock.frequency_hz
    if freq.denominator != 1 or freq.numerator > _U64_MAX:
        raise ValidationError(f"NTT1 needs an integral clock frequency in Hz, got {freq}")
    return HEADER.pack(
        MAGIC,
        VERSION,
        freq.numerator,
        meta.pixel_count,
        0,
        meta.seed,
        meta.cycle_length_ns,
        meta.dead_time_ns,
    )


def _unpack_header(buf: bytes) -> RunMetadata:
    if len(buf) < HEADER_SIZE:
        raise TruncatedRecordError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes")
    magic, version, freq, pixel_count, reserved, seed, cycle, dead = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported NTT1 version {version}")
    if reserved != 0:
        raise DecodeError(f"reserved header field is {reserved}, expected 0")
    try:
        return RunMetadata(
            clock=ClockConfig.from_frequency(freq),
            pixel_count=pixel_count,
            cycle_length_ns=cycle,
            dead_time_ns=dead,
            seed=seed,
        )
    except ValidationError as exc:
        raise DecodeError(f"invalid header: {exc}") from exc


def _check_payload(meta: RunMetadata, events: np.ndarray) -> None:
    if events.shape[0] and int(events["pixel"].max()) >= meta.pixel_count:
        raise ValidationError("event pixel index exceeds pixel_count")


def encode_run(meta: RunMetadata, events) -> bytes:
    events = as_events(events)
    check_sorted(events)
    _check_payload(meta, events)
    return _pack_header(meta) + events.tobytes()


def _decode_payload(meta: RunMetadata, payload) -> np.ndarray:
    nbytes = len(payload) if not isinstance(payload, np.ndarray) else payload.nbytes
    if nbytes % RECORD_SIZE:
        raise TruncatedRecordError(
            f"payload of {nbytes} bytes is not a whole number of {RECORD_SIZE}-byte records"
        )
    events = np.frombuffer(payload, dtype=EVENT_DTYPE)
    pos = _first_unsorted(events)
    if pos is not None:
        raise UnsortedPayloadError(f"records out of (tick, pixel) order at record {pos}")
    if events.shape[0] and int(events["pixel"].max()) >= meta.pixel_count:
        raise DecodeError("record pixel index exceeds header pixel_count")
    return events


def decode_run(data: bytes) -> tuple[RunMetadata, np.ndarray]:
    meta = _unpack_header(data)
    events = _decode_payload(meta, memoryview(data)[HEADER_SIZE:])
    return meta, events.copy()


def write_run(path, meta: RunMetadata, chunks: Iterable[np.ndarray]) -> int:
    """Stream event chunks to an NTT1 file; returns the number of records written.

    Chunks must be sorted and non-overlapping in time order.
    """
    header = _pack_header(meta)
    written = 0
    last = None
    with open(path, "wb") as fh:
        fh.write(header)
        for i, chunk in enumerate(chunks):
            chunk = as_events(chunk)
            if not chunk.shape[0]:
                continue
            check_sorted(chunk, stream=i)
            _check_payload(meta, chunk)
            head = (int(chunk["tick"][0]), int(chunk["pixel"][0]))
            if last is not None and head < last:
                raise UnsortedStreamError(i, 0)
            last = (int(chunk["tick"][-1]), int(chunk["pixel"][-1]))
            fh.write(chunk.tobytes())
            written += chunk.shape[0]
    return written


def read_run(path, mmap: bool = True) -> tuple[RunMetadata, np.ndarray]:
    """Read an NTT1 file.  With ``mmap`` the payload is memory-mapped read-only."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    meta = _unpack_header(head)
    size = path.stat().st_size - HEADER_SIZE
    if size % RECORD_SIZE:
        raise TruncatedRecordError(
            f"payload of {size} bytes is not a whole number of {RECORD_SIZE}-byte records"
        )
    if mmap and size:
        payload = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER_SIZE)
        events = _decode_payload(meta, payload)
    else:
        events = _decode_payload(meta, path.read_bytes()[HEADER_SIZE:])
    return meta, events
