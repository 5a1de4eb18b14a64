"""Backward elimination of error-network edges.

For each candidate edge, the increase in minimal fitting cost caused by
zeroing that weight is predicted from the linearization at the trained
optimum: all state updates are eliminated once (reusing the batched sweep
with zero damping), leaving a single quadratic in the parameter update that
is minimized with the edge's coordinate pinned to the negated trained
weight. Candidates are ranked by predicted cost, the best one is retrained
from the linearized warm start, and the removal is kept or rolled back by a
configurable acceptance criterion.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import Grid, build_grid
from .lm_dense import LMConfig, default_b0
from .lm_parallel import (A_LAB, Partition, ReducedProblem, make_partition,
                          reduce_states, solve_parallel)
from .model import InvalidCandidate
from .qr_solver import RANK_RTOL
from .residual import Weights, align_measurements, assemble

log = logging.getLogger(__name__)


@dataclass
class TrainedPoint:
    """Converged decision vector and its cost."""

    b: np.ndarray
    cost: float
    grad_norm: float = 0.0


@dataclass
class RemovalEstimate:
    """Predicted effect of zeroing one weight edge."""

    edge: int
    predicted_cost: float     # linearized minimal cost after the removal
    delta: np.ndarray         # parameter update; delta[edge] == -trained weight
    warm_start: np.ndarray    # trained point plus the full linearized update


@dataclass
class PruneRecord:
    round: int
    edge: int
    layer: int
    source: int
    target: int
    predicted_cost: float
    retrained_cost: float
    criterion: str
    criterion_value: float
    accepted: bool
    warm: str = "linearized"


@dataclass
class PruneLog:
    records: list = field(default_factory=list)

    def append(self, rec: PruneRecord):
        self.records.append(rec)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "edge", "layer", "source", "target",
                        "predicted_cost", "retrained_cost", "criterion",
                        "criterion_value", "accepted"])
            for r in self.records:
                w.writerow([r.round, r.edge, r.layer, r.source, r.target,
                            repr(r.predicted_cost), repr(r.retrained_cost),
                            r.criterion, repr(r.criterion_value), int(r.accepted)])


def reduce_to_params(model, grid: Grid, data, weights: Weights, b_c: np.ndarray,
                     part: Optional[Partition] = None, executor=None) -> ReducedProblem:
    """Eliminate all state updates of the zero-damping linearization at the
    trained point. The result is shared by every candidate edge of a round."""
    entries = data if isinstance(data, list) else align_measurements(grid, data, weights)
    blocks = assemble(model, grid, entries, weights, b_c)
    if part is None:
        part = make_partition(grid.n_points, 1)
    return reduce_states(blocks, 0.0, part, executor=executor)


def _pinned_minimum(red: ReducedProblem, edge: int, pinned_value: float):
    """Minimize the reduced parameter quadratic with one coordinate fixed."""
    mat = red.delta_block.matrix(A_LAB)
    const = red.delta_block.const
    n_a = mat.shape[1]
    free = np.arange(n_a) != edge
    shifted = const + pinned_value * mat[:, edge]
    d_free, *_ = np.linalg.lstsq(mat[:, free], -shifted, rcond=RANK_RTOL)
    resid = mat[:, free] @ d_free + shifted
    delta = np.empty(n_a)
    delta[free] = d_free
    delta[edge] = pinned_value
    return float(resid @ resid), delta


def estimate_removal(red: ReducedProblem, network, b_c: np.ndarray,
                     edge: int) -> RemovalEstimate:
    """Predict the minimal cost after zeroing one weight edge.

    Works for an arbitrary edge index, not just the last parameter; the
    pinned coordinate of the returned update equals the negated trained
    weight exactly.
    """
    edge = int(edge)
    if not (0 <= edge < network.n_params) or not network.is_weight[edge]:
        raise InvalidCandidate(f"index {edge} does not address a weight edge")
    if not network.mask[edge]:
        raise InvalidCandidate(f"weight edge {edge} is inactive")
    b_c = np.asarray(b_c, dtype=float)
    alpha = b_c[b_c.size - network.n_params + edge]
    v_e, delta = _pinned_minimum(red, edge, -alpha)
    gamma = red.reconstruct(delta)
    return RemovalEstimate(edge=edge, predicted_cost=v_e, delta=delta,
                           warm_start=b_c + gamma)


def rank_candidates(red: ReducedProblem, network, b_c: np.ndarray,
                    candidates) -> list:
    """Candidates ordered by ascending predicted cost; ties break on the
    lower edge index."""
    candidates = sorted(int(e) for e in candidates)
    if not candidates:
        raise InvalidCandidate("empty candidate set")
    b_c = np.asarray(b_c, dtype=float)
    params = b_c[b_c.size - network.n_params:]
    scored = []
    for edge in candidates:
        if not network.is_weight[edge] or not network.mask[edge]:
            raise InvalidCandidate(f"candidate {edge} is not an active weight edge")
        v_e, _ = _pinned_minimum(red, edge, -params[edge])
        scored.append((edge, v_e))
    scored.sort(key=lambda t: (t[1], t[0]))
    return scored


# ---------------------------------------------------------------------------
# acceptance criteria
# ---------------------------------------------------------------------------

@dataclass
class PruneStats:
    """Inputs to the acceptance decision for one proposed removal."""

    cost_full: float           # trained cost of the unpruned network
    cost_before: float
    cost_after: float
    n_params_before: int
    n_params_after: int
    n_residuals: int           # total scalar measurement count
    val_cost_before: Optional[float] = None
    val_cost_after: Optional[float] = None


def information_value(criterion: str, cost: float, n_params: int, n_residuals: int) -> float:
    n = n_residuals
    base = n * np.log(max(cost, np.finfo(float).tiny) / n)
    if criterion == "aic":
        return float(base + 2 * n_params)
    if criterion == "bic":
        return float(base + n_params * np.log(n))
    raise ValueError(f"not an information criterion: {criterion!r}")


def accept(criterion: str, stats: PruneStats, kappa: float = 1.05):
    """Decide a proposed edge removal. Returns (accepted, criterion value)."""
    if criterion == "cost-limit":
        return stats.cost_after <= kappa * stats.cost_full, stats.cost_after / stats.cost_full
    if criterion == "cost-ratio":
        # relative to the current model: robust when the dense fit absorbs
        # noise and the cost level grows as capacity shrinks
        return stats.cost_after <= kappa * stats.cost_before, \
            stats.cost_after / stats.cost_before
    if criterion in ("aic", "bic"):
        before = information_value(criterion, stats.cost_before,
                                   stats.n_params_before, stats.n_residuals)
        after = information_value(criterion, stats.cost_after,
                                  stats.n_params_after, stats.n_residuals)
        return after < before, after
    if criterion == "cross-validation":
        if stats.val_cost_before is None or stats.val_cost_after is None:
            raise ValueError("cross-validation criterion needs validation costs")
        return stats.val_cost_after <= stats.val_cost_before, stats.val_cost_after
    raise ValueError(f"unknown acceptance criterion {criterion!r}")


def _with_schedule(model, mset):
    """Model with its per-time selection map rebuilt for another data set."""
    from dataclasses import replace

    from .model import SelectionMap
    if isinstance(model.h, SelectionMap) and model.h.by_time is not None:
        by_time = {float(t): comps for t, comps in zip(mset.times, mset.channels)}
        return replace(model, h=SelectionMap(model.n_x, by_time=by_time))
    return model


def _validation_solve(model, params, val_data, weights: Weights, dt_max: float,
                      lm_config: Optional[LMConfig] = None,
                      n_batches: int = 1, workers: int = 1,
                      b0: Optional[np.ndarray] = None):
    frozen = model.frozen(params) if model.network is not None else model
    frozen = _with_schedule(frozen, val_data)
    grid = build_grid(val_data.times, dt_max)
    if b0 is None:
        b0 = default_b0(frozen, grid, val_data, seed=0)
    cfg = lm_config or LMConfig()
    if cfg.sigma is not None:
        cfg = LMConfig(lambda0=cfg.lambda0, rho1=cfg.rho1, rho2=cfg.rho2,
                       sigma=None, max_iters=cfg.max_iters,
                       lambda_max=cfg.lambda_max)
    res = solve_parallel(frozen, grid, val_data, weights, b0,
                         config=cfg, n_batches=n_batches, workers=workers)
    return res.cost, res.b


def validation_cost(model, params, val_data, weights: Weights, dt_max: float,
                    lm_config: Optional[LMConfig] = None,
                    n_batches: int = 1, workers: int = 1) -> float:
    """Cost on held-out data with the network parameters frozen: only the
    states over the validation window are optimized."""
    cost, _ = _validation_solve(model, params, val_data, weights, dt_max,
                                lm_config=lm_config, n_batches=n_batches,
                                workers=workers)
    return cost


class ValidationScorer:
    """Held-out score of a parameter vector: the frozen-parameter fit to the
    validation window.

    Every call re-solves from the same deterministic start so scores of
    different parameter vectors are comparable; warm chaining across calls
    (warm_chain=True) is faster but makes scores order-dependent.
    """

    def __init__(self, val_data, weights: Weights, dt_max: float,
                 lm_config: Optional[LMConfig] = None, workers: int = 1,
                 warm_chain: bool = False):
        self.val_data = val_data
        self.weights = weights
        self.dt_max = dt_max
        self.lm_config = lm_config
        self.workers = workers
        self.warm_chain = warm_chain
        self._warm: Optional[np.ndarray] = None

    def score(self, model, params) -> float:
        cost, states = _validation_solve(model, params, self.val_data,
                                         self.weights, self.dt_max,
                                         lm_config=self.lm_config,
                                         workers=self.workers, b0=self._warm)
        if self.warm_chain:
            self._warm = states
        return cost


# ---------------------------------------------------------------------------
# the pruning loop
# ---------------------------------------------------------------------------

@dataclass
class PruneConfig:
    criterion: str = "aic"           # aic | bic | cost-limit | cost-ratio | cross-validation
    kappa: float = 1.05
    kappa_stages: Optional[list] = None  # per-stage kappa override
    staging: str = "none"            # none | by-degree
    n_batches: Optional[int] = None
    workers: int = 1
    max_removals: Optional[int] = None
    validation: object = None        # MeasurementSet for cross-validation
    val_dt_max: Optional[float] = None
    # early-stopping knobs used by cross-validation retrains
    val_every: int = 5
    val_patience: int = 4
    # consecutive rejections that end a stage; 1 = stop at first rejection
    reject_patience: int = 1
    # return rejected candidates to the pool after a later acceptance; the
    # stage then ends only when a full pass over the pool rejects everything
    retry_rejected: bool = False
    # before rejecting, re-run the retrain from a fresh deterministic start
    # and keep the better fit (guards against stalled warm-started retrains)
    verify_rejections: bool = False
    seed: int = 0


@dataclass
class PruneOutcome:
    model: object
    b: np.ndarray
    cost: float
    log: PruneLog


def _stages(network, staging: str) -> list:
    """Candidate filters per stage: each entry maps the current network to
    its candidate edge list."""
    if staging == "by-degree" and network.kind == "polynomial":
        degrees = sorted({network.feature_degree(e)
                          for e in range(network.n_params)}, reverse=True)
        return [(lambda net, d=d: [e for e in np.nonzero(net.mask)[0]
                                   if net.is_weight[e] and net.feature_degree(e) == d])
                for d in degrees]
    return [lambda net: [e for e in np.nonzero(net.mask)[0] if net.is_weight[e]]]


def prune_loop(model, grid: Grid, data, weights: Weights, b_trained: np.ndarray,
               lm_config: LMConfig, prune_config: Optional[PruneConfig] = None):
    """Backward elimination: one edge per round, warm-started retraining,
    stop a stage at its first rejection.

    lm_config.sigma should be the resolved stopping tolerance of the initial
    training so retrained fits converge to the same resolution.
    """
    cfg = prune_config or PruneConfig()
    if model.network is None:
        return PruneOutcome(model=model, b=np.asarray(b_trained, dtype=float),
                            cost=np.nan, log=PruneLog())
    entries = data if isinstance(data, list) else align_measurements(grid, data, weights)
    part = make_partition(grid.n_points,
                          cfg.n_batches if cfg.n_batches else 1)

    n_residuals = sum(v.size for v in (e.y for e in entries))

    current = model
    b_c = np.asarray(b_trained, dtype=float).copy()
    v_full = assemble(current, grid, entries, weights, b_c).cost()
    v_c = v_full
    val_before = None
    scorer = None
    if cfg.criterion == "cross-validation":
        if cfg.validation is None or cfg.val_dt_max is None:
            raise ValueError("cross-validation pruning needs validation data and step")
        scorer = ValidationScorer(cfg.validation, weights, cfg.val_dt_max,
                                  lm_config=lm_config, workers=cfg.workers)
        val_before = scorer.score(current, b_c[-current.n_params:])

    mset = None if isinstance(data, list) else data

    def retrain(new_model, start):
        if scorer is not None:
            return solve_parallel(
                new_model, grid, entries, weights, start, config=lm_config,
                n_batches=part.n_batches, workers=cfg.workers,
                val_fn=lambda b, m=new_model: scorer.score(m, b[-m.n_params:]),
                val_every=cfg.val_every, val_patience=cfg.val_patience)
        return solve_parallel(new_model, grid, entries, weights, start,
                              config=lm_config, n_batches=part.n_batches,
                              workers=cfg.workers)

    plog = PruneLog()
    round_no = 0
    removals = 0
    for stage_no, stage in enumerate(_stages(current.network, cfg.staging)):
        if cfg.kappa_stages is not None:
            kappa = cfg.kappa_stages[min(stage_no, len(cfg.kappa_stages) - 1)]
        else:
            kappa = cfg.kappa
        rejected: set = set()
        consecutive_rejections = 0
        while cfg.retry_rejected or consecutive_rejections < cfg.reject_patience:
            candidates = [e for e in stage(current.network) if e not in rejected]
            if not candidates:
                break
            if cfg.max_removals is not None and removals >= cfg.max_removals:
                return PruneOutcome(current, b_c, v_c, plog)
            red = reduce_to_params(current, grid, entries, weights, b_c, part)
            ranked = rank_candidates(red, current.network, b_c, candidates)
            edge, predicted = ranked[0]
            est = estimate_removal(red, current.network, b_c, edge)

            new_net = current.network.remove_edge(edge)
            new_model = current.with_network(new_net)
            # warm-start guard: fall back to hard zeroing if the linearized
            # start is worse
            b_hard = b_c.copy()
            b_hard[b_c.size - current.n_params + edge] = 0.0
            cost_lin = assemble(new_model, grid, entries, weights, est.warm_start).cost()
            cost_hard = assemble(new_model, grid, entries, weights, b_hard).cost()
            if cost_lin <= cost_hard:
                warm, warm_kind = est.warm_start, "linearized"
            else:
                warm, warm_kind = b_hard, "hard-zero"
                log.warning("edge %d: linearized warm start (%.6g) worse than "
                            "hard zeroing (%.6g); falling back", edge, cost_lin, cost_hard)

            res = retrain(new_model, warm)

            def decide(result):
                stats = PruneStats(
                    cost_full=v_full, cost_before=v_c, cost_after=result.cost,
                    n_params_before=int(current.network.mask.sum()),
                    n_params_after=int(new_net.mask.sum()),
                    n_residuals=n_residuals, val_cost_before=val_before,
                    val_cost_after=result.val_cost)
                ok, value = accept(cfg.criterion, stats, kappa=kappa)
                return ok, value, stats

            ok, value, stats = decide(res)
            if not ok and cfg.verify_rejections and mset is not None:
                b_fresh = default_b0(new_model, grid, mset, seed=cfg.seed)
                b_fresh[b_c.size - new_model.n_params:][~new_net.mask] = 0.0
                res_fresh = retrain(new_model, b_fresh)
                if res_fresh.cost < res.cost:
                    res = res_fresh
                    ok, value, stats = decide(res)

            layer, source, target = current.network.edge_description(edge)
            plog.append(PruneRecord(
                round=round_no, edge=int(edge), layer=layer, source=source,
                target=target, predicted_cost=float(predicted),
                retrained_cost=float(res.cost), criterion=cfg.criterion,
                criterion_value=float(value), accepted=bool(ok), warm=warm_kind))
            round_no += 1
            if not ok:
                rejected.add(edge)
                consecutive_rejections += 1
                continue
            consecutive_rejections = 0
            if cfg.retry_rejected:
                rejected.clear()
            current, b_c, v_c = new_model, res.b, res.cost
            removals += 1
            if cfg.criterion == "cross-validation":
                val_before = stats.val_cost_after
    return PruneOutcome(current, b_c, v_c, plog)
