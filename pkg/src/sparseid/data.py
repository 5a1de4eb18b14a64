"""Measurement data: long-format CSV ingestion and the in-memory set.

Channels may have independent schedules; a record is (time, channel id,
value) and records sharing a time form one measurement vector.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np


class IngestError(ValueError):
    pass


@dataclass
class MeasurementSet:
    """Per-time measurement vectors with their channel indices.

    times    : (N_m,) sorted distinct measurement times
    channels : per time, tuple of channel indices (h components)
    values   : per time, measured values aligned with channels
    """

    times: np.ndarray
    channels: list
    values: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise IngestError("measurement times must be sorted and distinct")

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_scalars(self) -> int:
        return sum(len(v) for v in self.values)

    @classmethod
    def from_records(cls, records) -> "MeasurementSet":
        """records: iterable of (time, channel index, value)."""
        by_time: dict = {}
        for t, c, v in records:
            by_time.setdefault(float(t), []).append((int(c), float(v)))
        times = np.asarray(sorted(by_time), dtype=float)
        channels, values = [], []
        for t in times:
            entries = sorted(by_time[float(t)])
            channels.append(tuple(c for c, _ in entries))
            values.append(np.asarray([v for _, v in entries], dtype=float))
        return cls(times=times, channels=channels, values=values)


_CHANNEL_RE = re.compile(r"^x(\d+)$")


def parse_channel(name: str) -> int:
    """Map a channel id like 'x1' to its 0-based component index."""
    m = _CHANNEL_RE.match(name.strip())
    if not m or int(m.group(1)) < 1:
        raise ValueError(f"unknown channel {name!r} (expected x1, x2, ...)")
    return int(m.group(1)) - 1


def ingest(path, channel_map=None) -> MeasurementSet:
    """Read a long-format CSV with header time,channel,value.

    channel_map optionally maps channel names to component indices; by
    default names x1, x2, ... map to components 0, 1, ....  Duplicate
    (time, channel) pairs and unparsable rows raise IngestError with the
    offending line number.
    """
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if [h.strip().lower() for h in header] != ["time", "channel", "value"]:
            raise IngestError(f"{path}: expected header time,channel,value, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise IngestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t = float(row[0])
                name = row[1].strip()
                c = channel_map[name] if channel_map is not None else parse_channel(name)
                v = float(row[2])
            except (ValueError, KeyError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(t) or not np.isfinite(v):
                raise IngestError(f"{path}:{lineno}: non-finite time or value")
            key = (t, c)
            if key in seen:
                raise IngestError(f"{path}:{lineno}: duplicate (time, channel) "
                                  f"({row[0].strip()}, {name})")
            seen.add(key)
            records.append((t, c, v))
    if not records:
        raise IngestError(f"{path}: no data rows")
    return MeasurementSet.from_records(records)


def write_csv(path, mset: MeasurementSet, channel_names=None):
    """Write a MeasurementSet back to the long CSV format."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "channel", "value"])
        for t, comps, vals in zip(mset.times, mset.channels, mset.values):
            for c, v in zip(comps, vals):
                name = channel_names[c] if channel_names else f"x{c + 1}"
                w.writerow([repr(float(t)), name, repr(float(v))])
