"""Damped-step solver that eliminates states batch by batch.

The damped linearized problem separates into one quadratic per grid interval
coupling neighbouring state updates plus the shared parameter update. The
interval range is split into contiguous batches; within each batch the
interior state updates are eliminated front to back (storing the minimizing
affine policies), the reduced batch quadratics are chained across batch
boundaries, the parameter update is solved from the final quadratic, and the
full step is recovered by evaluating the stored policies in reverse.

Batches are independent: the within-batch sweeps run as a parallel map over
batches, and results are combined in batch order so the output does not
depend on worker count or completion order. Peak per-worker memory is
O(batch length * (n_x + n_a)^2), never O(n_b^2).

The within-batch sweep uses a fixed column layout and direct LAPACK calls;
it is algebraically identical to repeated stack()/eliminate() calls (the
public batch_forward), which remain the reference path.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import get_lapack_funcs

from .grid import Grid
from .lm_dense import LMConfig, SolveResult, run_lm
from .qr_solver import (RANK_RTOL, LinearPolicy, QuadraticBlock, eliminate,
                        stack, zero_block)
from .residual import ResidualBlocks, Weights, align_measurements, assemble

A_LAB = ("a",)
_TINY = np.finfo(float).tiny


def x_lab(j: int) -> tuple:
    """Label of the state update at (1-based) grid point j."""
    return ("x", j)


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    """Split of the interval quadratics q_0..q_N (q_0 empty) into batches.

    zeta has n_batches+1 strictly increasing entries with zeta[0] = 0 and
    zeta[-1] = n_points + 1; batch s (1-based) owns quadratics
    zeta[s-1] .. zeta[s]-1 and eliminates the interior state updates
    zeta[s-1]+1 .. zeta[s]-1.
    """

    zeta: tuple
    n_points: int

    @property
    def n_batches(self) -> int:
        return len(self.zeta) - 1

    def blocks_of(self, s: int) -> range:
        return range(self.zeta[s - 1], self.zeta[s])

    def interior_of(self, s: int) -> range:
        return range(self.zeta[s - 1] + 1, self.zeta[s])

    def boundary_state(self, s: int) -> int:
        """Left-boundary state index of batch s (0 means none: first batch)."""
        return self.zeta[s - 1]


def make_partition(n_points: int, n_batches: int) -> Partition:
    """Balanced partition: per-batch quadratic counts differ by at most 1."""
    if not (1 <= n_batches <= n_points):
        raise PartitionError(f"need 1 <= n_batches <= {n_points}, got {n_batches}")
    total = n_points + 1  # quadratics 0..n_points
    base, rem = divmod(total, n_batches)
    zeta = [0]
    for s in range(n_batches):
        zeta.append(zeta[-1] + base + (1 if s < rem else 0))
    return Partition(zeta=tuple(zeta), n_points=n_points)


# ---------------------------------------------------------------------------
# per-interval quadratics (reference construction)
# ---------------------------------------------------------------------------

def _q_matrix(ax, az, aa, val, lam, n_x):
    """Rows [A_x | A_z | A_a | value] plus sqrt(lam) damping on the x group."""
    m = ax.shape[0]
    n_a = aa.shape[1]
    damp = n_x if lam > 0 else 0
    mat = np.zeros((m + damp, 2 * n_x + n_a + 1))
    mat[:m, :n_x] = ax
    mat[:m, n_x:2 * n_x] = az
    mat[:m, 2 * n_x:2 * n_x + n_a] = aa
    mat[:m, -1] = val
    if damp:
        mat[m:, :n_x] = np.sqrt(lam) * np.eye(n_x)
    return mat


def build_q(blocks: ResidualBlocks, lam: float, j: int) -> QuadraticBlock:
    """Quadratic owned by (1-based) grid point j in the damped linearization.

    j = 0 is the empty quadratic; 1 <= j < n_points couples the updates at
    points j and j+1 plus the parameter update; j = n_points is the terminal
    quadratic in the last state update alone. lam = 0 omits damping rows.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n = blocks.n_points
    n_x = blocks.n_x
    if j == 0:
        return zero_block()
    if j == n:
        tx, tval = blocks.terminal_rows()
        m = tx.shape[0]
        damp = n_x if lam > 0 else 0
        mat = np.zeros((m + damp, n_x + 1))
        mat[:m, :n_x] = tx
        mat[:m, -1] = tval
        if damp:
            mat[m:, :n_x] = np.sqrt(lam) * np.eye(n_x)
        return QuadraticBlock(labels=(x_lab(j),), dims=(n_x,), mat=mat)
    ax, az, aa, val = blocks.interval_rows(j - 1)
    mat = _q_matrix(ax, az, aa, val, lam, n_x)
    return QuadraticBlock(labels=(x_lab(j), x_lab(j + 1), A_LAB),
                          dims=(n_x, n_x, blocks.n_a), mat=mat)


def build_r(blocks: ResidualBlocks, lam: float) -> QuadraticBlock:
    """Parameter-update quadratic: regularization rows plus damping."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n_a = blocks.n_a
    damp = n_a if lam > 0 else 0
    mat = np.zeros((n_a + damp, n_a + 1))
    mat[:n_a, :n_a] = blocks.pa_coef * np.eye(n_a)
    mat[:n_a, -1] = blocks.pa_val
    if damp:
        mat[n_a:, :n_a] = np.sqrt(lam) * np.eye(n_a)
    return QuadraticBlock(labels=(A_LAB,), dims=(n_a,), mat=mat)


@dataclass
class BatchResult:
    """Reduced quadratic of one batch plus its interior elimination policies."""

    s: int
    w: QuadraticBlock
    policies: list  # LinearPolicy per interior state, ascending index


def batch_forward(q_blocks: list, batch_id: int = 1) -> BatchResult:
    """Reference within-batch sweep built from stack()/eliminate().

    q_blocks are the consecutive quadratics of one batch; every state the
    first block does not own is eliminated in ascending order.
    """
    if not q_blocks:
        raise PartitionError("batch must contain at least one quadratic")
    h = q_blocks[0]
    policies = []
    for q in q_blocks[1:]:
        h = stack(h, q)
        target = min(lab[1] for lab in q.labels if lab[0] == "x")
        policy, h = eliminate(h, x_lab(target))
        policies.append(policy)
    return BatchResult(s=batch_id, w=h, policies=policies)


# ---------------------------------------------------------------------------
# fast within-batch sweep on raw arrays
# ---------------------------------------------------------------------------

@dataclass
class RawPolicy:
    """Affine reconstruction in the sweep's fixed layout:
    state_j = c_bound @ bound + c_next @ next_state + c_a @ delta + off."""

    j: int
    bound: int            # 0 = no bound input
    next_state: int       # 0 = no next-state input
    c_bound: Optional[np.ndarray]
    c_next: Optional[np.ndarray]
    c_a: np.ndarray
    off: np.ndarray


@dataclass
class SweepResult:
    s: int
    w: QuadraticBlock
    raw_policies: list


def _batch_payload(blocks: ResidualBlocks, lam: float, part: Partition, s: int) -> dict:
    """Self-contained arrays for one batch's sweep (cheap to pickle)."""
    n = blocks.n_points
    j_first, j_last = part.zeta[s - 1], part.zeta[s] - 1
    i0 = max(j_first, 1) - 1
    i1 = min(j_last, n - 1)  # intervals i0 .. i1-1
    meas = {}
    sel = np.nonzero((blocks.meas_j + 1 >= max(j_first, 1))
                     & (blocks.meas_j + 1 <= min(j_last, n - 1)))[0]
    for k in sel:
        meas.setdefault(int(blocks.meas_j[k]) + 1, []).append(
            (blocks.meas_val[k], blocks.meas_jac[k]))
    payload = dict(
        s=s, lam=lam, n_x=blocks.n_x, n_a=blocks.n_a, n_points=n,
        j_first=j_first, j_last=j_last, i0=i0,
        defect_val=blocks.defect_val[i0:i1], defect_jx=blocks.defect_jx[i0:i1],
        defect_jz=blocks.defect_jz[i0:i1], defect_ja=blocks.defect_ja[i0:i1],
        reg_coef=None if blocks.reg_coef is None else blocks.reg_coef[i0:i1],
        reg_x_val=None if blocks.reg_coef is None else blocks.reg_x_val[i0:i1],
        reg_z_val=None if blocks.reg_coef is None else blocks.reg_z_val[i0:i1],
        meas=meas, terminal=None)
    if j_last == n:
        payload["terminal"] = blocks.terminal_rows()
    return payload


def _payload_q(p: dict, j: int) -> QuadraticBlock:
    """Reference quadratic for grid point j built from a batch payload."""
    n_x, n_a, lam = p["n_x"], p["n_a"], p["lam"]
    if j == 0:
        return zero_block()
    if j == p["n_points"]:
        tx, tval = p["terminal"]
        m = tx.shape[0]
        damp = n_x if lam > 0 else 0
        mat = np.zeros((m + damp, n_x + 1))
        mat[:m, :n_x] = tx
        mat[:m, -1] = tval
        if damp:
            mat[m:, :n_x] = np.sqrt(lam) * np.eye(n_x)
        return QuadraticBlock(labels=(x_lab(j),), dims=(n_x,), mat=mat)
    i = j - 1 - p["i0"]
    ax = [p["defect_jx"][i]]
    az = [p["defect_jz"][i]]
    aa = [p["defect_ja"][i]]
    val = [p["defect_val"][i]]
    if p["reg_coef"] is not None:
        c = p["reg_coef"][i]
        eye = c * np.eye(n_x)
        zero = np.zeros((n_x, n_x))
        ax += [eye, zero]
        az += [zero, eye]
        aa.append(np.zeros((2 * n_x, n_a)))
        val += [p["reg_x_val"][i], p["reg_z_val"][i]]
    for mval, mjac in p["meas"].get(j, ()):
        ax.append(mjac)
        az.append(np.zeros((mjac.shape[0], n_x)))
        aa.append(np.zeros((mjac.shape[0], n_a)))
        val.append(mval)
    mat = _q_matrix(np.concatenate(ax), np.concatenate(az), np.concatenate(aa),
                    np.concatenate(val), lam, n_x)
    return QuadraticBlock(labels=(x_lab(j), x_lab(j + 1), A_LAB),
                          dims=(n_x, n_x, n_a), mat=mat)


def _q_row_count(p: dict, j: int) -> int:
    n_x = p["n_x"]
    if j == p["n_points"]:
        m = p["terminal"][0].shape[0]
    else:
        m = n_x + (2 * n_x if p["reg_coef"] is not None else 0)
        m += sum(v.shape[0] for v, _ in p["meas"].get(j, ()))
    return m + (n_x if p["lam"] > 0 else 0)


def _fill_q_rows(p: dict, j: int, buf: np.ndarray, row: int,
                 c_r: slice, c_n, c_a: slice):
    """Write the rows of quadratic j into the sweep buffer starting at row."""
    n_x, n_a, lam = p["n_x"], p["n_a"], p["lam"]
    if j == p["n_points"]:
        tx, tval = p["terminal"]
        m = tx.shape[0]
        buf[row:row + m, c_r] = tx
        buf[row:row + m, -1] = tval
        row += m
    else:
        i = j - 1 - p["i0"]
        buf[row:row + n_x, c_r] = p["defect_jx"][i]
        buf[row:row + n_x, c_n] = p["defect_jz"][i]
        if n_a:
            buf[row:row + n_x, c_a] = p["defect_ja"][i]
        buf[row:row + n_x, -1] = p["defect_val"][i]
        row += n_x
        if p["reg_coef"] is not None:
            c = p["reg_coef"][i]
            for k in range(n_x):
                buf[row + k, c_r.start + k] = c
            buf[row:row + n_x, -1] = p["reg_x_val"][i]
            row += n_x
            for k in range(n_x):
                buf[row + k, c_n.start + k] = c
            buf[row:row + n_x, -1] = p["reg_z_val"][i]
            row += n_x
        for mval, mjac in p["meas"].get(j, ()):
            m = mjac.shape[0]
            buf[row:row + m, c_r] = mjac
            buf[row:row + m, -1] = mval
            row += m
    if lam > 0:
        sq = p["sqrt_lam"]
        for k in range(n_x):
            buf[row + k, c_r.start + k] = sq
        row += n_x
    return row


def _run_batch(p: dict) -> SweepResult:
    """Within-batch forward sweep, eliminating interior states front to back.

    Carried-quadratic column layout: [bound | current state | a | 1]; each
    step stacks the next quadratic as [state | bound | next | a | 1],
    factors, reads the policy off the triangular part, and carries the rest.
    Falls back to the generic eliminate() when the local group is rank
    deficient.
    """
    j_first, j_last, n_x, n_a = p["j_first"], p["j_last"], p["n_x"], p["n_a"]
    n_points = p["n_points"]
    p["sqrt_lam"] = np.sqrt(p["lam"])
    nb = n_x if j_first >= 1 else 0
    bound = j_first

    if j_last == j_first:
        return SweepResult(s=p["s"], w=_payload_q(p, j_first), raw_policies=[])

    # carried quadratic, layout [bound | state j_first+? | a | 1]
    if j_first == 0:
        h = np.zeros((0, nb + n_x + n_a + 1))
    else:
        q0 = _payload_q(p, j_first)  # labels (x_j, x_{j+1}, a); reorder to layout
        m0 = q0.mat
        h = np.empty_like(m0)
        h[:, :n_x] = m0[:, :n_x]                 # bound = state j_first
        h[:, n_x:2 * n_x] = m0[:, n_x:2 * n_x]   # current = state j_first+1
        h[:, 2 * n_x:] = m0[:, 2 * n_x:]

    w_full = n_x + nb + n_x + n_a + 1
    geqrf, = get_lapack_funcs(("geqrf",), (np.empty((2, 2)),))
    lwork = int(geqrf(np.zeros((w_full + 16, w_full), order="F"),
                      lwork=-1)[2][0].real)
    trtrs, = get_lapack_funcs(("trtrs",), (np.empty((2, 2)),))

    policies = []
    triu_masks: dict = {}
    for j in range(j_first + 1, j_last + 1):
        nz = n_x if j < n_points else 0
        w = n_x + nb + nz + n_a + 1
        m = h.shape[0] + _q_row_count(p, j)
        buf = np.zeros((m, w), order="F")
        rh = h.shape[0]
        # carried rows: current state moves to the front (it is eliminated)
        buf[:rh, :n_x] = h[:, nb:nb + n_x]
        if nb:
            buf[:rh, n_x:n_x + nb] = h[:, :nb]
        buf[:rh, n_x + nb + nz:] = h[:, nb + n_x:]
        c_r = slice(0, n_x)
        c_n = slice(n_x + nb, n_x + nb + nz)
        c_a = slice(n_x + nb + nz, n_x + nb + nz + n_a)
        _fill_q_rows(p, j, buf, rh, c_r, c_n, c_a)

        r_mat, tau, work, info = geqrf(buf, lwork=lwork, overwrite_a=True)
        rows = min(m, w)
        diag = np.abs(r_mat.diagonal()[:n_x])
        if m >= n_x and diag.min() > RANK_RTOL * max(diag.max(), _TINY):
            r11 = r_mat[:n_x, :n_x]
            r12 = r_mat[:n_x, n_x:]
            sol, info2 = trtrs(r11, r12, lower=0)
            coef = -sol
            h = r_mat[n_x:rows, n_x:].copy()
            key = h.shape
            mask = triu_masks.get(key)
            if mask is None:
                mask = np.tri(*key, k=-1, dtype=bool)
                triu_masks[key] = mask
            h[mask] = 0.0
        else:
            # rank-deficient local group: generic minimum-norm elimination
            labels = [x_lab(j)]
            dims = [n_x]
            if nb:
                labels.append(x_lab(bound))
                dims.append(n_x)
            if nz:
                labels.append(x_lab(j + 1))
                dims.append(n_x)
            labels.append(A_LAB)
            dims.append(n_a)
            stacked = np.zeros((m, w))
            stacked[:rh, :n_x] = h[:, nb:nb + n_x] if rh else 0.0
            if nb and rh:
                stacked[:rh, n_x:n_x + nb] = h[:, :nb]
            if rh:
                stacked[:rh, n_x + nb + nz:] = h[:, nb + n_x:]
            _fill_q_rows(p, j, stacked, rh, c_r, c_n, c_a)
            block = QuadraticBlock(labels=tuple(labels), dims=tuple(dims), mat=stacked)
            policy, reduced = eliminate(block, x_lab(j))
            coef = np.concatenate([policy.coef, policy.offset[:, None]], axis=1)
            h = reduced.mat
        policies.append(RawPolicy(
            j=j, bound=bound if nb else 0, next_state=j + 1 if nz else 0,
            c_bound=np.ascontiguousarray(coef[:, :nb]) if nb else None,
            c_next=np.ascontiguousarray(coef[:, nb:nb + nz]) if nz else None,
            c_a=np.ascontiguousarray(coef[:, nb + nz:nb + nz + n_a]),
            off=coef[:, -1].copy()))

    # wrap the carried quadratic with its labels
    labels, dims, cols = [], [], []
    if nb:
        labels.append(x_lab(bound))
        dims.append(n_x)
    if j_last < n_points:
        labels.append(x_lab(j_last + 1))
        dims.append(n_x)
    labels.append(A_LAB)
    dims.append(n_a)
    w_block = QuadraticBlock(labels=tuple(labels), dims=tuple(dims),
                             mat=np.ascontiguousarray(h))
    return SweepResult(s=p["s"], w=w_block, raw_policies=policies)


# ---------------------------------------------------------------------------
# chain across batches and solve
# ---------------------------------------------------------------------------

@dataclass
class ReducedProblem:
    """All state updates eliminated: a quadratic in the parameter update plus
    the policies needed to reconstruct every eliminated state update."""

    delta_block: QuadraticBlock     # quadratic over the parameter update only
    boundary_policies: dict         # state index -> LinearPolicy (chain stage)
    raw_policies: list              # RawPolicy (within-batch stage)
    partition: Partition
    n_x: int
    n_a: int

    def reconstruct(self, delta: np.ndarray) -> np.ndarray:
        """Evaluate stored policies in dependency order; returns the full
        update vector (state updates stacked, then the parameter update)."""
        part = self.partition
        n = part.n_points
        delta = np.asarray(delta, dtype=float)
        betas = np.empty((n + 1, self.n_x))  # 1-based state indices
        values = {A_LAB: delta}
        for j in sorted(self.boundary_policies, reverse=True):
            pol = self.boundary_policies[j]
            vals = {A_LAB: delta}
            for lab in pol.inputs:
                if lab != A_LAB:
                    vals[lab] = betas[lab[1]]
            betas[j] = pol(vals)
            values[x_lab(j)] = betas[j]
        for pol in sorted(self.raw_policies, key=lambda q: -q.j):
            v = pol.c_a @ delta + pol.off
            if pol.c_bound is not None:
                v += pol.c_bound @ betas[pol.bound]
            if pol.c_next is not None:
                v += pol.c_next @ betas[pol.next_state]
            betas[pol.j] = v
        gamma = np.empty(n * self.n_x + self.n_a)
        gamma[:n * self.n_x] = betas[1:].ravel()
        gamma[n * self.n_x:] = delta
        return gamma


def chain_and_solve(batch_results: list, r_block: QuadraticBlock):
    """Chain the reduced batch quadratics, then solve for the parameter
    update. Returns (delta, boundary state updates by index, final quadratic
    over the parameter update, boundary policies by index)."""
    results = sorted(batch_results, key=lambda r: r.s)
    g = results[0].w
    boundary_policies = {}
    for res in results[1:]:
        xs = [lab[1] for lab in res.w.labels if lab[0] == "x"]
        target = min(xs)  # left boundary of this batch
        policy, g = eliminate(stack(g, res.w), x_lab(target))
        boundary_policies[target] = policy
    delta_block = stack(g, r_block)
    policy_delta, _ = eliminate(delta_block, A_LAB)
    delta = policy_delta({})
    values = {A_LAB: delta}
    boundary = {}
    for j in sorted(boundary_policies, reverse=True):
        values[x_lab(j)] = boundary_policies[j](values)
        boundary[j] = values[x_lab(j)]
    return delta, boundary, delta_block, boundary_policies


def reduce_states(blocks: ResidualBlocks, lam: float, part: Partition,
                  executor=None) -> ReducedProblem:
    """Eliminate all state updates, keeping the policies."""
    payloads = [_batch_payload(blocks, lam, part, s)
                for s in range(1, part.n_batches + 1)]
    if executor is None:
        results = [_run_batch(p) for p in payloads]
    else:
        results = list(executor.map(_run_batch, payloads))
    results.sort(key=lambda r: r.s)

    g = results[0].w
    boundary_policies = {}
    for res in results[1:]:
        target = part.boundary_state(res.s)
        policy, g = eliminate(stack(g, res.w), x_lab(target))
        boundary_policies[target] = policy
    delta_block = stack(g, build_r(blocks, lam))
    raw = [pol for res in results for pol in res.raw_policies]
    return ReducedProblem(delta_block=delta_block,
                          boundary_policies=boundary_policies,
                          raw_policies=raw, partition=part,
                          n_x=blocks.n_x, n_a=blocks.n_a)


def lm_step_parallel(blocks: ResidualBlocks, lam: float, part: Partition,
                     executor=None) -> np.ndarray:
    """Damped update equal to the full normal-equations solve, computed by
    batched elimination and policy back-substitution."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    red = reduce_states(blocks, lam, part, executor=executor)
    policy_delta, _ = eliminate(red.delta_block, A_LAB)
    return red.reconstruct(policy_delta({}))


def default_n_batches(n_points: int, workers: int) -> int:
    cap = max(1, -(-n_points // 4))
    return max(1, min(workers, cap, n_points))


def solve_parallel(model, grid: Grid, data, weights: Weights, b0: np.ndarray,
                   config: Optional[LMConfig] = None,
                   n_batches: Optional[int] = None,
                   workers: int = 1, val_fn=None, val_every: int = 5,
                   val_patience: int = 4) -> SolveResult:
    """Solve the fitting problem with the batched step.

    workers > 1 runs the batch sweeps in a process pool; results are
    combined in batch order, so outputs are identical for any worker count.
    val_fn enables early stopping on a held-out score (see run_lm).
    """
    config = config or LMConfig()
    entries = data if isinstance(data, list) else align_measurements(grid, data, weights)
    if n_batches is None:
        n_batches = default_n_batches(grid.n_points, max(workers, 1))
    part = make_partition(grid.n_points, n_batches)

    def assemble_fn(b):
        return assemble(model, grid, entries, weights, b)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            def step_fn(blocks, lam):
                return lm_step_parallel(blocks, lam, part, executor=pool)
            return run_lm(assemble_fn, step_fn, b0, config,
                          val_fn=val_fn, val_every=val_every,
                          val_patience=val_patience)

    def step_fn(blocks, lam):
        return lm_step_parallel(blocks, lam, part, executor=None)

    return run_lm(assemble_fn, step_fn, b0, config,
                  val_fn=val_fn, val_every=val_every, val_patience=val_patience)
