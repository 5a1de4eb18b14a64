import numpy as np
import pytest

from sparseid.grid import Grid, GridError, build_grid, merge_times


def test_hand_case_quarter():
    g = build_grid([0.0, 0.25, 1.0], 0.3)
    assert np.allclose(g.t, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert g.n_points == 5
    assert list(g.meas_idx) == [0, 1, 4]


def test_single_interval():
    g = build_grid([0.0, 1.0], 1.0)
    assert list(g.t) == [0.0, 1.0]
    assert g.n_points == 2


def test_lorenz_schedule_size():
    times = np.union1d(np.round(np.arange(17) * 0.3, 12),
                       np.round(np.arange(13) * 0.4, 12))
    assert times.size == 25
    g = build_grid(times, 1e-3)
    assert g.n_points == 4801
    # every measurement time appears bit-exactly
    for t in times:
        assert t in g.t
    assert g.meas_idx.size == 25


def test_spacing_bound_and_minimality(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        times = np.sort(rng.uniform(0.0, 10.0, n))
        times = merge_times(times)
        if times.size < 2:
            continue
        dt_max = float(rng.uniform(0.05, 2.0))
        g = build_grid(times, dt_max)
        assert g.dt.max() <= dt_max * (1 + 1e-12)
        # minimality: one fewer subinterval would violate the bound
        pos = {t: i for i, t in enumerate(g.t)}
        for a, b in zip(times[:-1], times[1:]):
            n_sub = pos[b] - pos[a]
            assert n_sub >= 1
            if n_sub > 1:
                assert (b - a) / (n_sub - 1) > dt_max * (1 - 1e-9)


def test_idempotence():
    g = build_grid([0.0, 0.25, 1.0], 0.3)
    g2 = build_grid(g.t, 0.3)
    assert np.array_equal(g.t, g2.t)


def test_near_duplicates_merged():
    span = 1.0
    times = [0.0, 0.5, 0.5 + 1e-14 * span, 1.0]
    g = build_grid(times, 0.5)
    assert g.meas_idx.size == 3


def test_errors():
    with pytest.raises(GridError):
        build_grid([0.0], 0.1)
    with pytest.raises(GridError):
        build_grid([0.0, 1.0], 0.0)
    with pytest.raises(GridError):
        build_grid([], 0.1)


def test_grid_fields():
    g = build_grid([0.0, 1.0, 2.5], 0.6)
    assert np.allclose(g.t_mid, 0.5 * (g.t[:-1] + g.t[1:]))
    assert np.allclose(g.dt, np.diff(g.t))
    assert g.t[0] == 0.0 and g.t[-1] == 2.5
    assert isinstance(g, Grid)
    assert np.allclose(g.meas_times, [0.0, 1.0, 2.5])
