"""Time discretization: a point set covering all measurement times with a
maximum spacing, plus the index bookkeeping every other module relies on."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative gap below which two measurement times are considered the same instant.
MERGE_RTOL = 1e-12


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Strictly increasing time points with measurement indices.

    t        : (N,) discretization times; first/last are measurement times.
    meas_idx : sorted indices into t of the measurement times (0-based).
    dt       : (N-1,) interval lengths.
    t_mid    : (N-1,) interval midpoints.
    """

    t: np.ndarray
    meas_idx: np.ndarray
    dt: np.ndarray = field(init=False)
    t_mid: np.ndarray = field(init=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "meas_idx", np.asarray(self.meas_idx, dtype=int))
        object.__setattr__(self, "dt", np.diff(t))
        object.__setattr__(self, "t_mid", 0.5 * (t[:-1] + t[1:]))

    @property
    def n_points(self) -> int:
        return self.t.size

    @property
    def meas_times(self) -> np.ndarray:
        return self.t[self.meas_idx]


def merge_times(times) -> np.ndarray:
    """Sort and merge near-duplicate times (gap < MERGE_RTOL * span)."""
    times = np.sort(np.asarray(times, dtype=float))
    if times.size < 2:
        return times
    span = times[-1] - times[0]
    tol = MERGE_RTOL * span
    keep = np.concatenate(([True], np.diff(times) > tol))
    return times[keep]


def _n_subintervals(gap: float, dt_max: float) -> int:
    """Smallest n with gap / n <= dt_max, robust to roundoff in gap / dt_max."""
    n = int(np.ceil(gap / dt_max))
    if n > 1 and gap / (n - 1) <= dt_max * (1.0 + 1e-12):
        n -= 1
    return max(n, 1)


def build_grid(meas_times, dt_max: float) -> Grid:
    """Discretize the span of the measurement times.

    Each interval between consecutive measurement times is split into the
    smallest number of uniform subintervals whose length does not exceed
    dt_max. Measurement times appear in the grid bit-exactly.
    """
    if dt_max <= 0:
        raise GridError(f"dt_max must be positive, got {dt_max}")
    tm = merge_times(meas_times)
    if tm.size < 2:
        raise GridError("need at least 2 distinct measurement times")

    points = []
    meas_idx = []
    for i in range(tm.size - 1):
        gap = tm[i + 1] - tm[i]
        n = _n_subintervals(gap, dt_max)
        meas_idx.append(len(points))
        points.append(tm[i])
        # interior points; endpoints stay bit-exact
        for k in range(1, n):
            points.append(tm[i] + gap * (k / n))
    meas_idx.append(len(points))
    points.append(tm[-1])

    t = np.asarray(points, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise GridError("grid points not strictly increasing; dt_max too small "
                        "relative to measurement-time gaps")
    return Grid(t=t, meas_idx=np.asarray(meas_idx, dtype=int))
