"""Elimination engine for sum-of-squares quadratics.

A QuadraticBlock represents ||M_r r + M_s s + M_1||^2 over named variable
groups. eliminate() minimizes over one group, returning the minimizing
affine policy and the reduced quadratic in the remaining groups; stack()
adds quadratics by row concatenation after aligning variable groups.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

# Diagonal entries of the triangular factor at or below this fraction of the
# largest one are treated as zero rank (pseudoinverse cutoff).
RANK_RTOL = 1e-12


class VariableMismatch(ValueError):
    pass


@dataclass(frozen=True)
class QuadraticBlock:
    """value(vars) = || sum_g M_g x_g + m_1 ||^2 with named groups g.

    labels : ordered group labels (hashable, e.g. ("x", 3) or ("a",))
    dims   : column count per group
    mat    : (rows, sum(dims) + 1); the last column is the constant m_1.
    """

    labels: tuple
    dims: tuple
    mat: np.ndarray

    def __post_init__(self):
        if len(self.labels) != len(self.dims):
            raise VariableMismatch("labels/dims length mismatch")
        if self.mat.ndim != 2 or self.mat.shape[1] != sum(self.dims) + 1:
            raise VariableMismatch(
                f"matrix has {self.mat.shape[1]} columns, expected {sum(self.dims) + 1}")

    @property
    def n_rows(self) -> int:
        return self.mat.shape[0]

    def col_range(self, label) -> tuple[int, int]:
        start = 0
        for lab, d in zip(self.labels, self.dims):
            if lab == label:
                return start, start + d
            start += d
        raise KeyError(label)

    def matrix(self, label) -> np.ndarray:
        a, b = self.col_range(label)
        return self.mat[:, a:b]

    @property
    def const(self) -> np.ndarray:
        return self.mat[:, -1]

    def value(self, values: dict) -> float:
        """Evaluate the quadratic at the given group values."""
        v = self.const.copy()
        for lab, d in zip(self.labels, self.dims):
            a, b = self.col_range(lab)
            v += self.mat[:, a:b] @ np.asarray(values[lab], dtype=float)
        return float(v @ v)


def zero_block() -> QuadraticBlock:
    return QuadraticBlock(labels=(), dims=(), mat=np.zeros((0, 1)))


def from_groups(groups: list[tuple], const: np.ndarray) -> QuadraticBlock:
    """Build a block from [(label, matrix), ...] plus the constant column."""
    const = np.asarray(const, dtype=float)
    labels = tuple(lab for lab, _ in groups)
    mats = [np.asarray(m, dtype=float) for _, m in groups]
    dims = tuple(m.shape[1] for m in mats)
    mat = np.concatenate(mats + [const[:, None]], axis=1) if mats else const[:, None].copy()
    return QuadraticBlock(labels=labels, dims=dims, mat=mat)


@dataclass(frozen=True)
class LinearPolicy:
    """Affine reconstruction of an eliminated group from the remaining ones:
    target = coef @ concat(inputs) + offset."""

    target: tuple
    inputs: tuple
    input_dims: tuple
    coef: np.ndarray
    offset: np.ndarray

    def __call__(self, values: dict) -> np.ndarray:
        if not self.inputs:
            return self.offset.copy()
        s = np.concatenate([np.asarray(values[lab], dtype=float) for lab in self.inputs])
        return self.coef @ s + self.offset


def stack(*blocks: QuadraticBlock) -> QuadraticBlock:
    """Sum of quadratics: concatenate rows, aligning variable groups.

    Group order of the result: first-seen order across the arguments.
    A zero-row block is the identity element.
    """
    blocks = [b for b in blocks if b is not None]
    if len(blocks) == 1:
        return blocks[0]
    labels: list = []
    dims: list = []
    for b in blocks:
        for lab, d in zip(b.labels, b.dims):
            if lab in labels:
                if dims[labels.index(lab)] != d:
                    raise VariableMismatch(f"group {lab!r} has conflicting dims")
            else:
                labels.append(lab)
                dims.append(d)
    total = sum(dims)
    offsets = {}
    start = 0
    for lab, d in zip(labels, dims):
        offsets[lab] = start
        start += d
    n_rows = sum(b.n_rows for b in blocks)
    mat = np.zeros((n_rows, total + 1))
    row = 0
    for b in blocks:
        r = b.n_rows
        col = 0
        for lab, d in zip(b.labels, b.dims):
            o = offsets[lab]
            mat[row:row + r, o:o + d] = b.mat[:, col:col + d]
            col += d
        mat[row:row + r, -1] = b.mat[:, -1]
        row += r
    return QuadraticBlock(labels=tuple(labels), dims=tuple(dims), mat=mat)


def eliminate(block: QuadraticBlock, label) -> tuple[LinearPolicy, QuadraticBlock]:
    """Minimize the block over one variable group.

    Returns the minimizing policy (minimum-norm when the group's columns are
    rank deficient) and the reduced quadratic in the remaining groups, such
    that reduced(s) = min_r block(r, s) for every s.
    """
    a0, a1 = block.col_range(label)
    dr = a1 - a0
    rest_idx = np.r_[0:a0, a1:block.mat.shape[1]]
    s_labels = tuple(l for l in block.labels if l != label)
    s_dims = tuple(d for l, d in zip(block.labels, block.dims) if l != label)
    ds = sum(s_dims)

    m_r = block.mat[:, a0:a1]
    m_rest = block.mat[:, rest_idx]  # [M_s | m_1]
    m = block.n_rows

    if m == 0 or dr == 0:
        policy = LinearPolicy(target=label, inputs=s_labels, input_dims=s_dims,
                              coef=np.zeros((dr, ds)), offset=np.zeros(dr))
        reduced = QuadraticBlock(labels=s_labels, dims=s_dims,
                                 mat=m_rest.copy() if m else np.zeros((0, ds + 1)))
        return policy, reduced

    a = np.concatenate((m_r, m_rest), axis=1)
    r = np.linalg.qr(a, mode="r")
    full_rank = False
    if r.shape[0] >= dr:
        diag = np.abs(np.diag(r[:dr, :dr]))
        full_rank = diag.min() > RANK_RTOL * max(diag.max(), np.finfo(float).tiny)
    if full_rank:
        coef = -solve_triangular(r[:dr, :dr], r[:dr, dr:], lower=False, check_finite=False)
        red_mat = r[dr:, dr:]
    else:
        # rank-deficient local group: minimum-norm policy via pseudoinverse
        coef = -np.linalg.pinv(m_r, rcond=RANK_RTOL) @ m_rest
        red_mat = m_rest + m_r @ coef
        if red_mat.shape[0] > red_mat.shape[1]:
            red_mat = np.linalg.qr(red_mat, mode="r")

    policy = LinearPolicy(target=label, inputs=s_labels, input_dims=s_dims,
                          coef=np.ascontiguousarray(coef[:, :-1]), offset=coef[:, -1].copy())
    reduced = QuadraticBlock(labels=s_labels, dims=s_dims, mat=np.ascontiguousarray(red_mat))
    return policy, reduced
