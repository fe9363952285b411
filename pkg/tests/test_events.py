import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_window
from oracles import histogram_loop, voxel_loop
from neurodet.events import (
    EventFormatError, EventWindow, encode_histogram, encode_voxel, normalize_frame, parse_events,
    read_events, serialize_events, slice_windows, write_events,
)


def header(w=8, h=6, t0=0, t1=100):
    return struct.pack("<4sHHQQ", b"EVT1", w, h, t0, t1)


def record(t, x, y, p):
    return struct.pack("<QHHB3x", t, x, y, p)


def test_empty_payload_parses_to_empty_window():
    w = parse_events(header())
    assert len(w) == 0
    assert (w.sensor_width, w.sensor_height, w.t_start, w.t_end) == (8, 6, 0, 100)


def test_single_record_roundtrip():
    w = parse_events(header() + record(5, 3, 2, 1))
    assert list(w) == [(5, 3, 2, 1)]
    assert serialize_events(w) == header() + record(5, 3, 2, 1)


def test_random_roundtrip_1000_records(rng):
    w = random_window(rng, n=1000, width=64, height=48)
    assert parse_events(serialize_events(w)) == w


def test_file_roundtrip(tmp_path, rng):
    w = random_window(rng, n=50)
    write_events(tmp_path / "a.evt", w)
    assert read_events(tmp_path / "a.evt") == w


def test_unsorted_records_are_resorted_stably():
    w = parse_events(header() + record(9, 1, 1, 1) + record(3, 2, 2, 0) + record(9, 0, 0, 0))
    assert [e.t for e in w] == [3, 9, 9]
    assert [e.x for e in w] == [2, 1, 0]


@pytest.mark.parametrize("data,offset", [
    (b"EVT", 0),
    (b"XXXX" + header()[4:], 0),
    (header() + b"\0" * 7, 24),
    (header() + record(5, 8, 0, 1), 24),
    (header() + record(5, 0, 0, 1) + record(5, 0, 6, 1), 40),
    (header() + record(5, 0, 0, 2), 24),
    (header(t0=10) + record(5, 0, 0, 1), 24),
    (header() + record(101, 0, 0, 1), 24),
])
def test_malformed_input_reports_offset(data, offset):
    with pytest.raises(EventFormatError) as ei:
        parse_events(data)
    assert ei.value.offset == offset


def test_histogram_examples():
    assert not encode_histogram(EventWindow.from_events([], 0, 10, 8, 4)).any()
    w = EventWindow.from_events([(1, 5, 2, 1)] * 3, 0, 10, 8, 4)
    h = encode_histogram(w)
    assert h[0, 2, 5] == 3 and h.sum() == 3
    h = encode_histogram(EventWindow.from_events([(0, 0, 0, 0)], 0, 10, 8, 4))
    assert h[1, 0, 0] == 1 and not h[0].any()


def test_voxel_examples():
    def one(t):
        return encode_voxel(EventWindow.from_events([(t, 1, 1, 1)], 0, 100, 3, 3), 3)

    assert one(0)[0, 1, 1] == 1.0 and one(0).sum() == 1.0
    v = one(25)  # t* = 0.5
    assert v[0, 1, 1] == 0.5 and v[1, 1, 1] == 0.5 and v[2].sum() == 0
    assert one(100)[2, 1, 1] == 1.0 and one(100).sum() == 1.0


def test_voxel_degenerate_window_goes_to_bin_zero():
    w = EventWindow.from_events([(7, 0, 0, 1), (7, 1, 0, 0)], 7, 7, 2, 1)
    v = encode_voxel(w, 4)
    assert v[0].sum() == 2 and v[1:].sum() == 0


def test_signed_voxel():
    w = EventWindow.from_events([(0, 0, 0, 1), (0, 0, 0, 0), (0, 1, 0, 0)], 0, 10, 2, 1)
    v = encode_voxel(w, 2, signed=True)
    assert v[0, 0, 0] == 0 and v[0, 0, 1] == -1


def test_normalize_frame():
    assert not normalize_frame(np.zeros((2, 3, 3), np.uint8)).any()
    img = np.full((2, 2, 3), 255, np.uint8)
    img[0, 1, 2] = 128
    t = normalize_frame(img)
    assert t.shape == (3, 2, 2)
    assert t[2, 0, 1] == 128 / 255 and t[0, 0, 0] == 1.0
    with pytest.raises(TypeError):
        normalize_frame(np.zeros((2, 2), np.float32))


@given(st.integers(0, 2**31))
def test_encoders_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    w = random_window(rng)
    evs = list(w)
    bins = int(rng.integers(1, 6))
    assert np.array_equal(encode_histogram(w), histogram_loop(evs, w.sensor_width, w.sensor_height))
    vox = voxel_loop(evs, w.t_start, w.t_end, w.sensor_width, w.sensor_height, bins)
    assert np.array_equal(encode_voxel(w, bins), vox)


@given(st.integers(0, 2**31))
def test_mass_conservation_order_invariance_and_b1(seed):
    rng = np.random.default_rng(seed)
    w = random_window(rng)
    n = len(w)
    assert encode_histogram(w).sum() == n
    assert encode_voxel(w, 5).sum() == pytest.approx(n, abs=1e-9)
    assert np.array_equal(encode_voxel(w, 1)[0], encode_histogram(w).sum(axis=0))
    # order: a permutation of same-timestamp-sorted events
    perm = w.events[rng.permutation(n)]
    shuffled = EventWindow(perm[np.argsort(perm["t"], kind="stable")], w.t_start, w.t_end,
                           w.sensor_width, w.sensor_height)
    assert np.array_equal(encode_histogram(shuffled), encode_histogram(w))
    assert np.allclose(encode_voxel(shuffled, 3), encode_voxel(w, 3), atol=1e-12)


def test_slice_windows_partitions_stream(rng):
    w = random_window(rng, n=500, span=350_000)
    parts = slice_windows(w, 100_000)
    assert len(parts) == 4
    assert sum(len(p) for p in parts) == 500
    for p in parts:
        p.check()
        assert p.t_end - p.t_start <= 100_000
    assert len(slice_windows(EventWindow.from_events([], 5, 5, 2, 2), 1000)) == 1
