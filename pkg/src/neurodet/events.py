"""Event streams: EVT1 binary I/O and tensor encodings.

Events are kept as a numpy structured array with fields ``t`` (µs), ``x``,
``y`` and ``p`` (0 = negative, 1 = positive). Encoded tensors are plain
``(C, H, W)`` float64 arrays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHHQQ")
HEADER_SIZE = HEADER.size  # 24
RECORD_SIZE = 16

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
# on-disk record: same fields plus three zero pad bytes
_RECORD_DTYPE = np.dtype(
    {"names": ["t", "x", "y", "p"], "formats": ["<u8", "<u2", "<u2", "u1"],
     "offsets": [0, 8, 10, 12], "itemsize": RECORD_SIZE}
)


class EventFormatError(ValueError):
    """Raised for malformed EVT1 payloads; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


@dataclass(eq=False)
class EventWindow:
    events: np.ndarray
    t_start: int
    t_end: int
    sensor_width: int
    sensor_height: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        if self.t_end < self.t_start:
            raise ValueError("t_end must be >= t_start")

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventWindow):
            return NotImplemented
        return (
            (self.t_start, self.t_end, self.sensor_width, self.sensor_height)
            == (other.t_start, other.t_end, other.sensor_width, other.sensor_height)
            and np.array_equal(self.events, other.events)
        )

    def __iter__(self):
        for t, x, y, p in self.events.tolist():
            yield Event(t, x, y, p)

    @classmethod
    def from_events(cls, events, t_start, t_end, width, height) -> "EventWindow":
        arr = np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)
        w = cls(arr, t_start, t_end, width, height)
        w.check()
        return w

    def check(self) -> None:
        """Raise ``ValueError`` if any event violates the window invariants."""
        ev = self.events
        if len(ev) == 0:
            return
        if np.any(ev["x"] >= self.sensor_width) or np.any(ev["y"] >= self.sensor_height):
            raise ValueError("event coordinate outside sensor bounds")
        if np.any(ev["p"] > 1):
            raise ValueError("polarity must be 0 or 1")
        if np.any(ev["t"] < self.t_start) or np.any(ev["t"] > self.t_end):
            raise ValueError("event timestamp outside window")
        if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise ValueError("events are not sorted by timestamp")


def serialize_events(w: EventWindow) -> bytes:
    header = HEADER.pack(MAGIC, w.sensor_width, w.sensor_height, w.t_start, w.t_end)
    rec = np.zeros(len(w.events), dtype=_RECORD_DTYPE)
    for name in EVENT_DTYPE.names:
        rec[name] = w.events[name]
    return header + rec.tobytes()


def parse_events(data: bytes) -> EventWindow:
    if len(data) < HEADER_SIZE:
        raise EventFormatError(f"truncated header: {len(data)} bytes", 0)
    magic, width, height, t_start, t_end = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", 0)
    if t_end < t_start:
        raise EventFormatError("header t_end < t_start", 12)
    payload = len(data) - HEADER_SIZE
    if payload % RECORD_SIZE:
        raise EventFormatError(
            f"payload of {payload} bytes is not a whole number of {RECORD_SIZE}-byte records",
            HEADER_SIZE + payload - payload % RECORD_SIZE,
        )
    rec = np.frombuffer(data, dtype=_RECORD_DTYPE, offset=HEADER_SIZE)
    events = np.empty(len(rec), dtype=EVENT_DTYPE)
    for name in EVENT_DTYPE.names:
        events[name] = rec[name]

    def _first_bad(mask: np.ndarray, what: str):
        if mask.any():
            i = int(np.argmax(mask))
            raise EventFormatError(f"record {i}: {what}", HEADER_SIZE + i * RECORD_SIZE)

    _first_bad((events["x"] >= width) | (events["y"] >= height), "coordinate outside sensor bounds")
    _first_bad(events["p"] > 1, "polarity is not 0/1")
    _first_bad((events["t"] < t_start) | (events["t"] > t_end), "timestamp outside header window")

    if np.any(np.diff(events["t"].astype(np.int64)) < 0):
        events = events[np.argsort(events["t"], kind="stable")]
    return EventWindow(events, t_start, t_end, width, height)


def read_events(path) -> EventWindow:
    with open(path, "rb") as fh:
        return parse_events(fh.read())


def write_events(path, w: EventWindow) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_events(w))


def slice_windows(w: EventWindow, window_us: int) -> list[EventWindow]:
    """Cut a long stream into consecutive fixed-length windows.

    Window k covers ``[t_start + k*L, t_start + (k+1)*L)``; the last window is
    closed at the stream's ``t_end`` and may be shorter.
    """
    if window_us <= 0:
        raise ValueError("window length must be positive")
    span = w.t_end - w.t_start
    n = max(1, -(-span // window_us))
    idx = (w.events["t"] - np.uint64(w.t_start)) // np.uint64(window_us)
    idx = np.minimum(idx.astype(np.int64), n - 1)
    out = []
    for k in range(n):
        lo = w.t_start + k * window_us
        hi = min(lo + window_us, w.t_end)
        out.append(EventWindow(w.events[idx == k], lo, hi, w.sensor_width, w.sensor_height))
    return out


def encode_histogram(w: EventWindow) -> np.ndarray:
    """Two-channel polarity histogram: channel 0 positive, channel 1 negative."""
    hist = np.zeros((2, w.sensor_height, w.sensor_width), dtype=np.float64)
    ev = w.events
    chan = 1 - ev["p"].astype(np.intp)
    np.add.at(hist, (chan, ev["y"].astype(np.intp), ev["x"].astype(np.intp)), 1.0)
    return hist


def normalized_times(w: EventWindow, bins: int) -> np.ndarray:
    """Event times mapped onto ``[0, bins-1]``; degenerate windows map to 0."""
    dt = w.t_end - w.t_start
    rel = (w.events["t"] - np.uint64(w.t_start)).astype(np.float64)
    if dt == 0:
        return np.zeros(len(rel))
    return (bins - 1) * rel / float(dt)


def encode_voxel(w: EventWindow, bins: int, signed: bool = False) -> np.ndarray:
    """Voxel grid with linear interpolation of each event over adjacent bins.

    ``signed=True`` gives negative events a -1 contribution instead of +1.
    """
    if bins < 1:
        raise ValueError("bin count must be >= 1")
    grid = np.zeros((bins, w.sensor_height, w.sensor_width), dtype=np.float64)
    ev = w.events
    if len(ev) == 0:
        return grid
    ts = normalized_times(w, bins)
    left = np.floor(ts)
    # bins are [left, left+1]; weight formula kept identical to the per-bin form
    b = np.stack([left, left + 1.0], axis=1)
    weight = np.maximum(0.0, 1.0 - np.abs(ts[:, None] - b))
    if signed:
        weight = weight * np.where(ev["p"] == 1, 1.0, -1.0)[:, None]
    keep = b < bins
    # event-major ordering so accumulation order matches a per-event loop
    bi = b.astype(np.intp)[keep]
    yi = np.repeat(ev["y"].astype(np.intp), 2).reshape(-1, 2)[keep]
    xi = np.repeat(ev["x"].astype(np.intp), 2).reshape(-1, 2)[keep]
    np.add.at(grid, (bi, yi, xi), weight[keep])
    return grid


def normalize_frame(image: np.ndarray) -> np.ndarray:
    """``H×W×C`` (or ``H×W``) uint8 image to a channel-first tensor in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError("expected an unsigned 8-bit image")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected H×W×C image, got shape {img.shape}")
    return np.transpose(img, (2, 0, 1)).astype(np.float64) / 255.0
