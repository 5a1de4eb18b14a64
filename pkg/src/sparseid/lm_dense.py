"""Reference Levenberg-Marquardt solver over the full decision vector.

Forms the damped normal equations from the residual blocks (never the dense
Jacobian) and iterates the accept/reject damping schedule. Single-threaded
by design: this is the correctness oracle for the batched solver.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cho_factor, cho_solve

from . import residual
from .grid import Grid
from .residual import ResidualBlocks, Weights, align_measurements, assemble, split_b

# above this decision-vector size the normal equations are kept sparse
DENSE_LIMIT = 1500


class StepFailure(RuntimeError):
    """Numerical failure of the damped step; the caller should raise lambda."""


class InvalidStart(ValueError):
    pass


@dataclass
class LMConfig:
    lambda0: float = 1e-2
    rho1: float = 2.0
    rho2: float = 3.0
    sigma: Optional[float] = None  # None: 1e-6 * (1 + initial gradient norm)
    max_iters: int = 500
    lambda_max: float = 1e12
    min_rel_decrease: float = 1e-12

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if not (self.rho2 >= self.rho1 > 1):
            raise ValueError("need rho2 >= rho1 > 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class SolveResult:
    b: np.ndarray
    cost: float
    cost_history: np.ndarray     # current cost after each iteration
    lambda_history: np.ndarray   # damping used at each iteration
    accepted: np.ndarray         # whether each iteration's step was kept
    termination: str             # gradient | max_iters | lambda_max | validation
    grad_norm: float
    val_cost: Optional[float] = None  # held-out cost of the returned iterate

    @property
    def n_iters(self) -> int:
        return self.lambda_history.size


def normal_system(blocks: ResidualBlocks, lam: float):
    """Damped normal matrix J^T J + lam*I (dense or CSC) and rhs J^T g."""
    n_x, n_a, n = blocks.n_x, blocks.n_a, blocks.n_points
    n_b = blocks.n_b
    a_off = n_x * n

    dense = n_b <= DENSE_LIMIT
    if dense:
        h = np.zeros((n_b, n_b))

        def add(r, c, m):
            h[r:r + m.shape[0], c:c + m.shape[1]] += m
    else:
        rows_i, cols_i, vals = [], [], []

        def add(r, c, m):
            rr, cc = np.nonzero(np.ones_like(m, dtype=bool))
            rows_i.append(rr + r)
            cols_i.append(cc + c)
            vals.append(m.ravel())

    for i in range(n - 1):
        ax, az, aa, _ = blocks.interval_rows(i)
        ox, oz = i * n_x, (i + 1) * n_x
        add(ox, ox, ax.T @ ax)
        add(ox, oz, ax.T @ az)
        add(oz, ox, az.T @ ax)
        add(oz, oz, az.T @ az)
        if n_a:
            xa_ = ax.T @ aa
            za_ = az.T @ aa
            add(ox, a_off, xa_)
            add(a_off, ox, xa_.T)
            add(oz, a_off, za_)
            add(a_off, oz, za_.T)
            add(a_off, a_off, aa.T @ aa)
    tx, _ = blocks.terminal_rows()
    add((n - 1) * n_x, (n - 1) * n_x, tx.T @ tx)
    if n_a:
        add(a_off, a_off, blocks.pa_coef ** 2 * np.eye(n_a))

    rhs = 0.5 * blocks.gradient()  # J^T g

    if dense:
        h[np.diag_indices_from(h)] += lam
        return h, rhs
    rows_i.append(np.arange(n_b))
    cols_i.append(np.arange(n_b))
    vals.append(np.full(n_b, lam))
    h = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows_i), np.concatenate(cols_i))),
                      shape=(n_b, n_b)).tocsc()
    return h, rhs


def lm_step_dense(blocks: ResidualBlocks, lam: float) -> np.ndarray:
    """Damped update: minimizer of the linearized cost plus lam*||step||^2."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    h, rhs = normal_system(blocks, lam)
    try:
        if isinstance(h, np.ndarray):
            c = cho_factor(h, check_finite=False)
            return -cho_solve(c, rhs, check_finite=False)
        lu = spla.splu(h)
        step = -lu.solve(rhs)
        if not np.all(np.isfinite(step)):
            raise StepFailure("non-finite step from sparse solve")
        return step
    except np.linalg.LinAlgError as exc:
        raise StepFailure(str(exc)) from exc


def run_lm(assemble_fn: Callable, step_fn: Callable, b0: np.ndarray,
           config: LMConfig, val_fn: Optional[Callable] = None,
           val_every: int = 5, val_patience: int = 4) -> SolveResult:
    """Shared accept/reject damping loop used by both solvers.

    With val_fn (decision vector -> held-out cost), the loop scores every
    val_every-th accepted iterate and returns the best-scoring one, stopping
    once val_patience consecutive checks fail to improve on it (early
    stopping against overfitting; the other termination rules still apply).
    """
    b = np.asarray(b0, dtype=float).copy()
    blocks = assemble_fn(b)
    v = blocks.cost()
    if not np.isfinite(v):
        raise InvalidStart("cost at the initial point is not finite")
    grad = blocks.gradient()
    sigma = config.sigma if config.sigma is not None \
        else 1e-6 * (1.0 + float(np.linalg.norm(grad)))
    lam = config.lambda0

    best_val = np.inf
    best = (b.copy(), v)
    checks_since_best = 0
    accepts_since_check = 0
    if val_fn is not None:
        best_val = val_fn(b)

    costs, lams, accs = [], [], []
    termination = None
    while True:
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= sigma:
            termination = "gradient"
            break
        if len(lams) >= config.max_iters:
            termination = "max_iters"
            break
        if lam > config.lambda_max:
            termination = "lambda_max"
            break
        try:
            gamma = step_fn(blocks, lam)
            b_new = b + gamma
            blocks_new = assemble_fn(b_new)
            v_new = blocks_new.cost()
        except StepFailure:
            v_new = np.inf
            blocks_new = None
        accepted = (np.isfinite(v_new) and v_new < v
                    and (v - v_new) >= config.min_rel_decrease * v)
        if accepted:
            b, blocks, v = b_new, blocks_new, v_new
            grad = blocks.gradient()
            next_lam = lam / config.rho1
        else:
            next_lam = lam * config.rho2
        costs.append(v)
        lams.append(lam)
        accs.append(accepted)
        lam = next_lam
        if val_fn is not None and accepted:
            accepts_since_check += 1
            if accepts_since_check >= val_every:
                accepts_since_check = 0
                score = val_fn(b)
                if score < best_val:
                    best_val = score
                    best = (b.copy(), v)
                    checks_since_best = 0
                else:
                    checks_since_best += 1
                    if checks_since_best >= val_patience:
                        termination = "validation"
                        break

    if val_fn is not None:
        if termination != "validation" and accepts_since_check:
            score = val_fn(b)  # the last iterate may not have been scored
            if score < best_val:
                best_val = score
                best = (b.copy(), v)
        b, v = best
        val_cost = best_val
    else:
        val_cost = None
    return SolveResult(b=b, cost=v,
                       cost_history=np.asarray(costs, dtype=float),
                       lambda_history=np.asarray(lams, dtype=float),
                       accepted=np.asarray(accs, dtype=bool),
                       termination=termination,
                       grad_norm=float(np.linalg.norm(grad)),
                       val_cost=val_cost)


def default_b0(model, grid: Grid, mset, seed: int = 0) -> np.ndarray:
    """States from linear interpolation of the measured components (zeros for
    unmeasured ones); parameters drawn N(0, 0.1^2) from the given seed."""
    n = grid.n_points
    states = np.zeros((n, model.n_x))
    per_comp: dict = {}
    for t, comps, vals in zip(mset.times, mset.channels, mset.values):
        for c, v in zip(comps, vals):
            per_comp.setdefault(int(c), []).append((float(t), float(v)))
    for c, pts in per_comp.items():
        if c >= model.n_x:
            continue
        pts.sort()
        ts = np.asarray([p[0] for p in pts])
        vs = np.asarray([p[1] for p in pts])
        states[:, c] = np.interp(grid.t, ts, vs)
    rng = np.random.default_rng(seed)
    params = rng.normal(0.0, 0.1, model.n_params)
    return np.concatenate([states.ravel(), params])


def solve_dense(model, grid: Grid, data, weights: Weights, b0: np.ndarray,
                config: Optional[LMConfig] = None) -> SolveResult:
    """Reference solve of the full fitting problem."""
    config = config or LMConfig()
    entries = align_measurements(grid, data, weights) if not isinstance(data, list) \
        else data

    def assemble_fn(b):
        return assemble(model, grid, entries, weights, b)

    return run_lm(assemble_fn, lm_step_dense, b0, config)
