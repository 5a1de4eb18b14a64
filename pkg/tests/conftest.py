import numpy as np
import pytest

from sparseid.data import MeasurementSet
from sparseid.grid import build_grid
from sparseid.model import PolynomialNetwork, SelectionMap, SystemModel
from sparseid.residual import Weights, align_measurements, assemble


def fd_jacobian(f, x, step=None):
    """Central-difference Jacobian of f at x (vector -> vector)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        h = step if step is not None else 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return jac


def dense_jacobian(blocks):
    """Stack the residual blocks into the full Jacobian and residual vector."""
    n_x, n_a, n = blocks.n_x, blocks.n_a, blocks.n_points
    n_b = blocks.n_b
    rows_j = []
    rows_g = []
    for i in range(n - 1):
        ax, az, aa, val = blocks.interval_rows(i)
        block = np.zeros((ax.shape[0], n_b))
        block[:, i * n_x:(i + 1) * n_x] = ax
        block[:, (i + 1) * n_x:(i + 2) * n_x] = az
        if n_a:
            block[:, n * n_x:] = aa
        rows_j.append(block)
        rows_g.append(val)
    tx, tval = blocks.terminal_rows()
    block = np.zeros((tx.shape[0], n_b))
    block[:, (n - 1) * n_x:n * n_x] = tx
    rows_j.append(block)
    rows_g.append(tval)
    if n_a:
        block = np.zeros((n_a, n_b))
        block[:, n * n_x:] = blocks.pa_coef * np.eye(n_a)
        rows_j.append(block)
        rows_g.append(blocks.pa_val)
    return np.concatenate(rows_j), np.concatenate(rows_g)


def random_problem(rng, n_x=None, n_points_target=None, n_a=None, mu_x=None):
    """A small random fitting problem with a polynomial error network."""
    n_x = n_x if n_x is not None else int(rng.integers(1, 4))
    degree = 2
    net = PolynomialNetwork(n_x, degree, n_x)
    if n_a is not None:
        # keep only the first n_a parameters active so n_a is controllable
        mask = np.zeros(net.n_params, dtype=bool)
        mask[:n_a] = True
        net = PolynomialNetwork(n_x, degree, n_x, mask=mask)
    h = SelectionMap(n_x, components=tuple(range(n_x)))
    model = SystemModel(n_x=n_x, h=h, network=net)

    n_times = int(rng.integers(3, 7))
    tm = np.sort(rng.uniform(0.0, 3.0, n_times))
    tm[0], tm[-1] = 0.0, 3.0
    tm = np.unique(tm)
    values = [rng.normal(0.0, 1.0, n_x) for _ in tm]
    mset = MeasurementSet(times=tm, channels=[tuple(range(n_x))] * tm.size,
                          values=values)
    target = n_points_target if n_points_target is not None else int(rng.integers(5, 31))
    dt_max = 3.0 / max(target - 1, 1)
    grid = build_grid(tm, dt_max)
    mu_x = float(rng.uniform(0.0, 0.5)) if mu_x is None else mu_x
    weights = Weights.isotropic(n_x, n_x, float(rng.uniform(0.5, 3.0)),
                                float(rng.uniform(0.5, 2.0)), mu_x=mu_x,
                                mu_a=float(rng.uniform(0.0, 0.1)))
    b = rng.normal(0.0, 0.5, grid.n_points * n_x + net.n_params)
    entries = align_measurements(grid, mset, weights)
    blocks = assemble(model, grid, entries, weights, b)
    return model, grid, mset, weights, entries, b, blocks


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
