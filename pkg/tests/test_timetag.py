import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fermi_hbt.exceptions import (
    BadMagicError,
    DecodeError,
    TruncatedRecordError,
    UnsortedPayloadError,
    UnsortedStreamError,
    ValidationError,
    VersionMismatchError,
)
from fermi_hbt.timetag import (
    EVENT_DTYPE,
    HEADER_SIZE,
    ClockConfig,
    RunMetadata,
    decode_run,
    encode_run,
    make_events,
    merge_streams,
    ns_to_ticks,
    read_run,
    sort_events,
    ticks_to_ns,
    write_run,
)

META = RunMetadata(ClockConfig(25), pixel_count=64, seed=7)


event_lists = st.integers(0, 60).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 2**40), min_size=n, max_size=n),
        st.lists(st.integers(0, 63), min_size=n, max_size=n),
        st.lists(st.integers(0, 2), min_size=n, max_size=n),
    )
)


def build(t):
    ticks, pix, flags = t
    ev = make_events(np.asarray(ticks, dtype=np.uint64), np.asarray(pix, dtype=np.uint16), np.asarray(flags, dtype=np.uint16))
    return sort_events(ev)


class TestClock:
    def test_frequency_times_period(self):
        for period in (25, Fraction(1, 3), 12.5, 1000):
            c = ClockConfig(period)
            assert c.frequency_hz * c.tick_period_ns == 10**9

    def test_from_frequency(self):
        assert ClockConfig.from_frequency(40_000_000).tick_period_ns == 25

    @pytest.mark.parametrize("bad", [0, -25])
    def test_bad_period(self, bad):
        with pytest.raises(ValidationError):
            ClockConfig(bad)

    def test_examples(self):
        assert ns_to_ticks(0) == 0
        assert ns_to_ticks(24.999) == 0
        assert ns_to_ticks(25) == 1
        assert ns_to_ticks(1000) == 40
        assert ticks_to_ns(40) == 1000

    def test_negative_time_rejected(self):
        with pytest.raises(ValidationError):
            ns_to_ticks(-1.0)
        with pytest.raises(ValidationError):
            ns_to_ticks(np.array([1.0, -0.5]))

    def test_overflow(self):
        with pytest.raises(OverflowError):
            ticks_to_ns(2**64 // 25 + 1)

    @given(st.integers(0, 2**64 // 25 - 1))
    def test_tick_round_trip(self, n):
        assert ns_to_ticks(ticks_to_ns(n)) == n

    @given(st.integers(0, 10**12), st.sampled_from([25, Fraction(25, 3), Fraction(1, 7), 8]))
    def test_tick_round_trip_any_period(self, n, period):
        clock = ClockConfig(period)
        assert ns_to_ticks(ticks_to_ns(n, clock), clock) == n

    def test_array_conversions(self):
        n = np.arange(0, 10**6, 997, dtype=np.uint64)
        assert np.array_equal(ns_to_ticks(ticks_to_ns(n)), n)


class TestMerge:
    def test_examples(self):
        out = merge_streams([[(10, 0)], [(5, 1)]])
        assert [(int(e["tick"]), int(e["pixel"])) for e in out] == [(5, 1), (10, 0)]
        assert merge_streams([[], []]).shape == (0,)

    def test_ties_by_pixel(self):
        out = merge_streams([[(5, 9)], [(5, 2)]])
        assert list(out["pixel"]) == [2, 9]

    def test_unsorted_input_names_stream_and_position(self):
        with pytest.raises(UnsortedStreamError) as exc:
            merge_streams([[(1, 0), (2, 0)], [(3, 0), (8, 0), (4, 0)]])
        assert exc.value.stream == 1 and exc.value.position == 2

    def test_many_pixel_streams(self):
        rng = np.random.default_rng(1)
        streams = []
        for p in range(64):
            t = np.sort(rng.integers(0, 10**9, 20_000)).astype(np.uint64)
            streams.append(make_events(t, np.full(t.shape, p, dtype=np.uint16)))
        out = merge_streams(streams)
        ref = sort_events(np.concatenate(streams))
        assert np.array_equal(out, ref)

    @pytest.mark.criterion(8)
    @given(st.lists(event_lists, max_size=4))
    def test_preserves_multiset_and_sorts(self, parts):
        streams = [build(p) for p in parts]
        out = merge_streams(streams)
        flat = np.concatenate(streams) if streams else np.empty(0, EVENT_DTYPE)
        assert sorted(out.tolist()) == sorted(flat.tolist())
        key = list(zip(out["tick"].tolist(), out["pixel"].tolist()))
        assert key == sorted(key)

    @given(event_lists, event_lists, event_lists)
    def test_associative(self, a, b, c):
        a, b, c = build(a), build(b), build(c)
        left = merge_streams([merge_streams([a, b]), c])
        right = merge_streams([a, merge_streams([b, c])])
        assert np.array_equal(left, right)


class TestCodec:
    def test_empty_is_header_only(self):
        data = encode_run(META, [])
        assert len(data) == HEADER_SIZE == 40
        meta, ev = decode_run(data)
        assert meta == META and ev.shape == (0,)

    def test_single_event(self):
        data = encode_run(META, [(1, 3)])
        assert len(data) == 52
        _, ev = decode_run(data)
        assert ev.tolist() == [(1, 3, 0)]

    def test_header_layout(self):
        data = encode_run(META, [])
        magic, version, freq, npix, reserved, seed, cycle, dead = struct.unpack("<4sIQHHQQI", data)
        assert (magic, version, freq, npix, reserved, seed) == (b"NTT1", 1, 40_000_000, 64, 0, 7)
        assert (cycle, dead) == (10**10, 10**7)

    def test_million_events(self):
        rng = np.random.default_rng(3)
        ev = sort_events(make_events(rng.integers(0, 2**50, 10**6).astype(np.uint64), rng.integers(0, 64, 10**6).astype(np.uint16)))
        data = encode_run(META, ev)
        assert len(data) == 40 + 12 * 10**6
        meta, back = decode_run(data)
        assert meta == META and np.array_equal(back, ev)

    @pytest.mark.criterion(8)
    @settings(max_examples=60)
    @given(
        event_lists,
        st.integers(0, 2**64 - 1),
        st.integers(1, 2**20),
        st.integers(0, 2**32 - 1),
        st.sampled_from([25, 10, 1, Fraction(1, 4)]),
    )
    def test_round_trip(self, t, seed, cycle, dead, period):
        meta = RunMetadata(ClockConfig(period), pixel_count=64, cycle_length_ns=cycle, dead_time_ns=dead, seed=seed)
        ev = build(t)
        back_meta, back = decode_run(encode_run(meta, ev))
        assert back_meta == meta
        assert np.array_equal(back, ev)

    def test_decode_errors_are_distinct(self):
        good = encode_run(META, [(1, 3), (2, 4)])
        with pytest.raises(BadMagicError):
            decode_run(b"XXXX" + good[4:])
        with pytest.raises(VersionMismatchError):
            decode_run(good[:4] + struct.pack("<I", 2) + good[8:])
        with pytest.raises(TruncatedRecordError):
            decode_run(good[:-1])
        swapped = good[:40] + good[52:] + good[40:52]
        with pytest.raises(UnsortedPayloadError):
            decode_run(swapped)
        with pytest.raises(DecodeError):
            decode_run(good[:20])
        with pytest.raises(DecodeError):
            decode_run(good[:18] + b"\x01\x00" + good[20:])

    def test_encode_rejects_unsorted(self):
        with pytest.raises(ValidationError):
            encode_run(META, [(5, 0), (1, 0)])

    def test_file_round_trip_in_chunks(self, tmp_path):
        rng = np.random.default_rng(5)
        ev = sort_events(make_events(rng.integers(0, 10**9, 5000).astype(np.uint64), rng.integers(0, 64, 5000).astype(np.uint16)))
        path = tmp_path / "run.ntt1"
        assert write_run(path, META, np.array_split(ev, 7)) == 5000
        assert path.read_bytes() == encode_run(META, ev)
        for mm in (True, False):
            meta, back = read_run(path, mmap=mm)
            assert meta == META and np.array_equal(back, ev)

    def test_write_rejects_overlapping_chunks(self, tmp_path):
        a = make_events(np.array([10, 20], dtype=np.uint64), np.zeros(2, dtype=np.uint16))
        b = make_events(np.array([15], dtype=np.uint64), np.zeros(1, dtype=np.uint16))
        with pytest.raises(UnsortedStreamError):
            write_run(tmp_path / "x.ntt1", META, [a, b])
