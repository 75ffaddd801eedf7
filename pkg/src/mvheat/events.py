"""Event streams: file formats, frame stacking and box annotations.

Formats
-------
CSV
    One event per line, ``t_us,x,y,p`` in ASCII decimal.
Packed
    Little-endian header ``b"EVS1"``, ``u32`` count, ``u16`` width,
    ``u16`` height, then ``count`` records of ``(u64 t_us, u16 x, u16 y, u8 p)``.
Annotations
    JSON object mapping frame id to a list of ``[x1, y1, x2, y2, cls]``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "EVENT_DTYPE",
    "SENSOR_SIZE",
    "EventFormatError",
    "EventValidationError",
    "AnnotationError",
    "EventStream",
    "EventFrames",
    "Annotation",
    "make_stream",
    "load_events",
    "save_events",
    "stack_events",
    "frames_to_input",
    "load_annotations",
    "save_annotations",
]

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
PACKED_MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sIHH")
SENSOR_SIZE = (720, 1280)


class EventFormatError(ValueError):
    """An event file could not be parsed."""


class EventValidationError(ValueError):
    """An event lies outside the declared sensor geometry or has a bad polarity."""


class AnnotationError(ValueError):
    """An annotation record is malformed or describes an empty box."""


@dataclass
class EventStream:
    events: np.ndarray
    width: int
    height: int
    reordered: int = 0

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other) -> bool:
        return (isinstance(other, EventStream) and self.width == other.width
                and self.height == other.height and np.array_equal(self.events, other.events))

    @property
    def t(self):
        return self.events["t"]

    @property
    def x(self):
        return self.events["x"]

    @property
    def y(self):
        return self.events["y"]

    @property
    def p(self):
        return self.events["p"]


def make_stream(t, x, y, p, width: int, height: int) -> EventStream:
    """Build a validated, time-ordered stream from column arrays."""
    ev = np.empty(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return _finalise(ev, width, height)


def _finalise(ev: np.ndarray, width: int, height: int) -> EventStream:
    if len(ev):
        bad = np.flatnonzero((ev["x"] >= width) | (ev["y"] >= height))
        if bad.size:
            i = int(bad[0])
            raise EventValidationError(
                f"event {i} at (x={ev['x'][i]}, y={ev['y'][i]}) outside {width}x{height} sensor")
        bad = np.flatnonzero(ev["p"] > 1)
        if bad.size:
            raise EventValidationError(f"event {int(bad[0])} has polarity {ev['p'][bad[0]]}, expected 0 or 1")
    reordered = 0
    if len(ev) > 1 and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
        order = np.argsort(ev["t"], kind="stable")
        reordered = int(np.count_nonzero(order != np.arange(len(ev))))
        ev = ev[order]
    return EventStream(ev, width, height, reordered)


def _load_csv(path: Path, width: int, height: int) -> EventStream:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError
                t, x, y, p = (int(v) for v in parts)
                if min(t, x, y, p) < 0:
                    raise ValueError
            except ValueError:
                raise EventFormatError(f"{path}:{lineno}: expected 't_us,x,y,p', got {line!r}") from None
            rows.append((t, x, y, p))
    ev = np.array(rows, dtype=EVENT_DTYPE) if rows else np.empty(0, dtype=EVENT_DTYPE)
    return _finalise(ev, width, height)


def _load_packed(path: Path) -> EventStream:
    blob = Path(path).read_bytes()
    if len(blob) == 0:
        return EventStream(np.empty(0, dtype=EVENT_DTYPE), SENSOR_SIZE[1], SENSOR_SIZE[0])
    if len(blob) < _HEADER.size:
        raise EventFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, count, width, height = _HEADER.unpack_from(blob)
    if magic != PACKED_MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r}")
    need = _HEADER.size + count * EVENT_DTYPE.itemsize
    if len(blob) != need:
        raise EventFormatError(f"{path}: expected {need} bytes for {count} events, found {len(blob)} "
                               f"(offset {min(len(blob), need)})")
    ev = np.frombuffer(blob, dtype=EVENT_DTYPE, count=count, offset=_HEADER.size).copy()
    return _finalise(ev, width, height)


def load_events(path, format: str | None = None, width: int | None = None,
                height: int | None = None) -> EventStream:
    """Read a CSV or packed event file.

    The packed header carries the sensor geometry; CSV files are validated
    against ``width``/``height`` (default 1280 x 720).  Out-of-order
    timestamps are stably sorted and counted in ``EventStream.reordered``.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "packed"
    if format == "csv":
        return _load_csv(path, width or SENSOR_SIZE[1], height or SENSOR_SIZE[0])
    if format == "packed":
        stream = _load_packed(path)
        if width is not None and height is not None and (stream.width, stream.height) != (width, height):
            raise EventValidationError(
                f"{path}: file geometry {stream.width}x{stream.height} differs from declared {width}x{height}")
        return stream
    raise ValueError(f"unknown event format {format!r}")


def save_events(stream: EventStream, path, format: str = "packed") -> None:
    path = Path(path)
    if format == "packed":
        header = _HEADER.pack(PACKED_MAGIC, len(stream), stream.width, stream.height)
        path.write_bytes(header + stream.events.astype(EVENT_DTYPE).tobytes())
    elif format == "csv":
        ev = stream.events
        lines = [f"{t},{x},{y},{p}" for t, x, y, p in zip(ev["t"], ev["x"], ev["y"], ev["p"])]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")
    else:
        raise ValueError(f"unknown event format {format!r}")


@dataclass
class EventFrames:
    counts: np.ndarray
    dropped: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def stack_events(stream: EventStream, t0: int, t1: int, bins: int, height: int, width: int) -> EventFrames:
    """Count events per (temporal bin, polarity, pixel) over ``[t0, t1)``.

    An event at time ``t`` lands in bin ``floor(bins * (t - t0) / (t1 - t0))``
    and channel ``2 * bin + p``.  Events outside the window or the frame are
    dropped and counted.
    """
    if not t1 > t0:
        raise ValueError(f"empty window [{t0}, {t1})")
    if bins < 1:
        raise ValueError("bins must be at least 1")
    ev = stream.events
    t = ev["t"].astype(np.int64)
    x, y = ev["x"].astype(np.int64), ev["y"].astype(np.int64)
    keep = (t >= t0) & (t < t1) & (x < width) & (y < height)
    b = (bins * (t[keep] - t0)) // (t1 - t0)
    ch = 2 * b + ev["p"][keep].astype(np.int64)
    counts = np.zeros((2 * bins, height, width), dtype=np.int64)
    np.add.at(counts, (ch, y[keep], x[keep]), 1)
    return EventFrames(counts, int(len(ev) - np.count_nonzero(keep)))


def frames_to_input(counts: np.ndarray, clip: float = 255.0) -> np.ndarray:
    """Clip counts at ``clip`` and scale into [0, 1]."""
    return np.minimum(counts, clip) / float(clip)


@dataclass(frozen=True)
class Annotation:
    x1: float
    y1: float
    x2: float
    y2: float
    cls: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise AnnotationError(f"empty box {self.as_list()}: need x1 < x2 and y1 < y2")

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2, self.cls]

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)


def _parse_record(frame, i, rec) -> Annotation:
    where = f"frame {frame!r}, record {i}"
    if not isinstance(rec, (list, tuple)) or len(rec) != 5:
        raise AnnotationError(f"{where}: expected [x1, y1, x2, y2, cls], got {rec!r}")
    *coords, cls = rec
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in coords):
        raise AnnotationError(f"{where}: coordinates must be numbers, got {coords!r}")
    if not isinstance(cls, int) or isinstance(cls, bool):
        raise AnnotationError(f"{where}: class must be an integer, got {cls!r}")
    try:
        return Annotation(*coords, cls)
    except AnnotationError as exc:
        raise AnnotationError(f"{where}: {exc}") from None


def load_annotations(path) -> list:
    """Read ``[(frame_id, [Annotation, ...]), ...]`` in file order."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list) and not data:
        return []
    if not isinstance(data, dict):
        raise AnnotationError(f"{path}: top level must be an object mapping frame id to boxes")
    out = []
    for frame, records in data.items():
        if not isinstance(records, list):
            raise AnnotationError(f"frame {frame!r}: expected a list of records")
        out.append((frame, [_parse_record(frame, i, r) for i, r in enumerate(records)]))
    return out


def save_annotations(frames, path) -> None:
    """Write ``[(frame_id, [Annotation, ...]), ...]`` (or a dict) as JSON."""
    items = frames.items() if isinstance(frames, dict) else frames
    data = {str(fid): [a.as_list() for a in anns] for fid, anns in items}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)
