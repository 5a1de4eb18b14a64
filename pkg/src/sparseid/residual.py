"""Residual vector of the discretized fitting problem and its block-sparse
Jacobian.

The decision vector stacks the states at every grid point followed by the
model parameters. Each grid interval contributes a block: scaled midpoint
defect rows, optional state-magnitude regularization rows, and measurement
rows when the interval's left point carries a measurement. The last grid
point contributes a terminal measurement block, and the parameters a
regularization block. The squared norm of the stacked residual is the
fitting cost.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .grid import MERGE_RTOL, Grid


class ConfigurationError(ValueError):
    pass


@dataclass
class DecisionVector:
    """States-then-parameters layout of the optimization variables."""

    states: np.ndarray  # (N, n_x)
    params: np.ndarray  # (n_a,)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.states.ravel(), self.params])

    @classmethod
    def from_flat(cls, b: np.ndarray, n_x: int, n_points: int) -> "DecisionVector":
        b = np.asarray(b, dtype=float)
        return cls(states=b[:n_x * n_points].reshape(n_points, n_x),
                   params=b[n_x * n_points:])


def split_b(b: np.ndarray, n_x: int, n_points: int):
    b = np.asarray(b, dtype=float)
    return b[:n_x * n_points].reshape(n_points, n_x), b[n_x * n_points:]


class Weights:
    """Scaling matrices and regularization constants of the fit.

    w_x and w_y are symmetric positive definite (checked by Cholesky at
    construction). w_x may also be a callable t -> matrix; w_y is constant
    over the measurement channel space, with per-channel-pattern factors
    derived from its submatrices.
    """

    def __init__(self, w_x, w_y, mu_x: float = 0.0, mu_a: float = 0.0):
        if mu_x < 0 or mu_a < 0:
            raise ConfigurationError("regularization constants must be nonnegative")
        self.mu_x = float(mu_x)
        self.mu_a = float(mu_a)
        self.w_x_fn = w_x if callable(w_x) else None
        self.w_x = None if callable(w_x) else np.atleast_2d(np.asarray(w_x, dtype=float))
        self.w_y = np.atleast_2d(np.asarray(w_y, dtype=float))
        try:
            self.s_x = None if self.w_x is None else cholesky(self.w_x, lower=True)
            self._sy_cache: dict = {}
            _ = self.s_y_factor(tuple(range(self.w_y.shape[0])))
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError(f"weight matrix is not positive definite: {exc}")

    @classmethod
    def isotropic(cls, n_x: int, n_chan: int, w_x: float, w_y: float,
                  mu_x: float = 0.0, mu_a: float = 0.0) -> "Weights":
        return cls(w_x * np.eye(n_x), w_y * np.eye(n_chan), mu_x=mu_x, mu_a=mu_a)

    def s_x_at(self, t: float) -> np.ndarray:
        if self.s_x is not None:
            return self.s_x
        w = np.atleast_2d(np.asarray(self.w_x_fn(t), dtype=float))
        return cholesky(w, lower=True)

    def s_y_factor(self, comps: Optional[tuple]) -> np.ndarray:
        key = comps
        if key not in self._sy_cache:
            sub = self.w_y if comps is None else self.w_y[np.ix_(comps, comps)]
            self._sy_cache[key] = cholesky(np.atleast_2d(sub), lower=True)
        return self._sy_cache[key]


@dataclass
class MeasEntry:
    """One measurement attached to a grid point: scaled residual inputs."""

    j: int                 # grid point index (0-based)
    y: np.ndarray          # measured values
    t: float
    sy: np.ndarray         # lower-triangular factor for these channels


def align_measurements(grid: Grid, mset, weights: Weights) -> list:
    """Match measurement times to grid indices and pre-factor the scaling."""
    span = grid.t[-1] - grid.t[0]
    tol = max(MERGE_RTOL * max(abs(span), 1.0), 0.0)
    entries = []
    for t, comps, vals in zip(mset.times, mset.channels, mset.values):
        j = int(np.searchsorted(grid.t, t))
        best = None
        for cand in (j - 1, j, j + 1):
            if 0 <= cand < grid.t.size and abs(grid.t[cand] - t) <= tol:
                best = cand
                break
        if best is None:
            raise ConfigurationError(f"measurement time {t!r} is not a grid point")
        entries.append(MeasEntry(j=best, y=np.asarray(vals, dtype=float),
                                 t=float(t), sy=weights.s_y_factor(tuple(comps))))
    entries.sort(key=lambda e: (e.j, e.t))
    return entries


@dataclass
class ResidualBlocks:
    """Residual values and Jacobian blocks, grouped by structure.

    Interval arrays are indexed by interval i (between grid points i, i+1);
    measurement rows are stored per aligned entry. Stacking interval block
    rows in order, then the terminal block, then the parameter block,
    reproduces the full residual vector exactly.
    """

    n_x: int
    n_a: int
    n_points: int
    defect_val: np.ndarray   # (N-1, n_x)
    defect_jx: np.ndarray    # (N-1, n_x, n_x)
    defect_jz: np.ndarray    # (N-1, n_x, n_x)
    defect_ja: np.ndarray    # (N-1, n_x, n_a)
    reg_coef: Optional[np.ndarray]   # (N-1,) or None when mu_x == 0
    reg_x_val: Optional[np.ndarray]  # (N-1, n_x)
    reg_z_val: Optional[np.ndarray]  # (N-1, n_x)
    meas_val: list           # per aligned entry, scaled residual (ny,)
    meas_jac: list           # per aligned entry, (ny, n_x)
    meas_j: np.ndarray       # grid point index per entry
    pa_val: np.ndarray       # (n_a,)
    pa_coef: float           # sqrt(mu_a)
    b: np.ndarray            # decision vector the blocks were built at

    @property
    def n_b(self) -> int:
        return self.n_x * self.n_points + self.n_a

    def _meas_at(self, j: int):
        for k in np.nonzero(self.meas_j == j)[0]:
            yield self.meas_val[k], self.meas_jac[k]

    def interval_rows(self, i: int):
        """Stacked rows of interval block i: (A_x, A_z, A_a, value)."""
        ax = [self.defect_jx[i]]
        az = [self.defect_jz[i]]
        aa = [self.defect_ja[i]]
        val = [self.defect_val[i]]
        n_x, n_a = self.n_x, self.n_a
        if self.reg_coef is not None:
            c = self.reg_coef[i]
            eye = c * np.eye(n_x)
            zero = np.zeros((n_x, n_x))
            ax += [eye, zero]
            az += [zero, eye]
            aa += [np.zeros((2 * n_x, n_a))]
            val += [self.reg_x_val[i], self.reg_z_val[i]]
        for mval, mjac in self._meas_at(i):
            ax.append(mjac)
            az.append(np.zeros((mjac.shape[0], n_x)))
            aa.append(np.zeros((mjac.shape[0], n_a)))
            val.append(mval)
        return (np.concatenate(ax), np.concatenate(az),
                np.concatenate(aa), np.concatenate(val))

    def terminal_rows(self):
        """Rows of the terminal block: (A_x, value) at the last grid point."""
        ax, val = [], []
        for mval, mjac in self._meas_at(self.n_points - 1):
            ax.append(mjac)
            val.append(mval)
        if not ax:
            return np.zeros((0, self.n_x)), np.zeros(0)
        return np.concatenate(ax), np.concatenate(val)

    def cost(self) -> float:
        total = float(np.sum(self.defect_val ** 2))
        if self.reg_coef is not None:
            total += float(np.sum(self.reg_x_val ** 2) + np.sum(self.reg_z_val ** 2))
        total += sum(float(v @ v) for v in self.meas_val)
        total += float(self.pa_val @ self.pa_val)
        return total

    def gradient(self) -> np.ndarray:
        """Gradient of the cost, 2 J^T g, assembled block by block."""
        n_x, n_a, n = self.n_x, self.n_a, self.n_points
        gx = np.zeros((n, n_x))
        ga = np.zeros(n_a)
        gx[:-1] += 2.0 * np.einsum("irc,ir->ic", self.defect_jx, self.defect_val)
        gx[1:] += 2.0 * np.einsum("irc,ir->ic", self.defect_jz, self.defect_val)
        if n_a:
            ga += 2.0 * np.einsum("irc,ir->c", self.defect_ja, self.defect_val)
        if self.reg_coef is not None:
            gx[:-1] += 2.0 * self.reg_coef[:, None] * self.reg_x_val
            gx[1:] += 2.0 * self.reg_coef[:, None] * self.reg_z_val
        for j, mval, mjac in zip(self.meas_j, self.meas_val, self.meas_jac):
            gx[j] += 2.0 * mjac.T @ mval
        ga += 2.0 * self.pa_coef * self.pa_val
        return np.concatenate([gx.ravel(), ga])


def assemble(model, grid: Grid, measurements, weights: Weights,
             b: np.ndarray) -> ResidualBlocks:
    """Evaluate all residual blocks at the decision vector b.

    measurements may be a MeasurementSet or a prebuilt alignment from
    align_measurements (the fast path used inside solver loops).
    """
    if measurements and isinstance(measurements, list):
        entries = measurements
    else:
        entries = align_measurements(grid, measurements, weights)

    n = grid.n_points
    n_x = model.n_x
    n_a = model.n_params
    states, a = split_b(b, n_x, n)

    xa = states[:-1]
    xb = states[1:]
    xm = 0.5 * (xa + xb)
    dt = grid.dt
    sqdt = np.sqrt(dt)

    f = model.eval_f(grid.t_mid, xm, a)
    jx = model.jac_f_x(grid.t_mid, xm, a)
    ja = model.jac_f_a(grid.t_mid, xm, a)

    raw_val = (xb - xa) / dt[:, None] - f
    inv_dt_eye = np.eye(n_x)[None, :, :] / dt[:, None, None]
    raw_jx = -inv_dt_eye - 0.5 * jx
    raw_jz = inv_dt_eye - 0.5 * jx

    if weights.s_x is not None and weights.w_x_fn is None:
        s = weights.s_x
        val = solve_triangular(s, raw_val.T, lower=True, check_finite=False).T
        djx = np.einsum("rc,icd->ird",
                        solve_triangular(s, np.eye(n_x), lower=True), raw_jx)
        djz = np.einsum("rc,icd->ird",
                        solve_triangular(s, np.eye(n_x), lower=True), raw_jz)
        dja = np.einsum("rc,icd->ird",
                        solve_triangular(s, np.eye(n_x), lower=True), -ja)
    else:
        val = np.empty_like(raw_val)
        djx = np.empty_like(raw_jx)
        djz = np.empty_like(raw_jz)
        dja = np.empty_like(ja)
        for i in range(n - 1):
            s = weights.s_x_at(grid.t_mid[i])
            val[i] = solve_triangular(s, raw_val[i], lower=True)
            djx[i] = solve_triangular(s, raw_jx[i], lower=True)
            djz[i] = solve_triangular(s, raw_jz[i], lower=True)
            dja[i] = solve_triangular(s, -ja[i], lower=True)

    defect_val = val * sqdt[:, None]
    defect_jx = djx * sqdt[:, None, None]
    defect_jz = djz * sqdt[:, None, None]
    defect_ja = dja * sqdt[:, None, None]

    if weights.mu_x > 0:
        reg_coef = np.sqrt(0.5 * weights.mu_x * dt)
        reg_x_val = reg_coef[:, None] * xa
        reg_z_val = reg_coef[:, None] * xb
    else:
        reg_coef = reg_x_val = reg_z_val = None

    meas_val, meas_jac, meas_j = [], [], []
    for e in entries:
        x_here = states[e.j]
        resid = e.y - model.eval_h(e.t, x_here)
        h_jac = model.jac_h_x(e.t, x_here)
        meas_val.append(solve_triangular(e.sy, resid, lower=True, check_finite=False))
        meas_jac.append(-solve_triangular(e.sy, h_jac, lower=True, check_finite=False))
        meas_j.append(e.j)

    pa_coef = float(np.sqrt(weights.mu_a))
    return ResidualBlocks(
        n_x=n_x, n_a=n_a, n_points=n,
        defect_val=defect_val, defect_jx=defect_jx, defect_jz=defect_jz,
        defect_ja=defect_ja, reg_coef=reg_coef, reg_x_val=reg_x_val,
        reg_z_val=reg_z_val, meas_val=meas_val, meas_jac=meas_jac,
        meas_j=np.asarray(meas_j, dtype=int), pa_val=pa_coef * a,
        pa_coef=pa_coef, b=np.asarray(b, dtype=float))


def cost(blocks: ResidualBlocks) -> float:
    return blocks.cost()


def gradient(blocks: ResidualBlocks) -> np.ndarray:
    return blocks.gradient()
