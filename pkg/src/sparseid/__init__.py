"""Sparse identification of ODE systems.

Joint state/parameter fitting of grey-box models by a Levenberg-Marquardt
method whose damped step is computed by batched elimination over the time
grid, plus backward elimination of error-network edges guided by a cheap
linearized prediction of each removal's cost impact.
"""

from .config import RunConfig, parse_config
from .data import MeasurementSet, ingest
from .grid import Grid, build_grid
from .lm_dense import LMConfig, SolveResult, default_b0, lm_step_dense, solve_dense
from .lm_parallel import (Partition, build_q, build_r, batch_forward,
                          chain_and_solve, lm_step_parallel, make_partition,
                          solve_parallel)
from .model import (CallbackMap, EluNetwork, ExogenousSignal, PolynomialNetwork,
                    SelectionMap, SystemModel, elu, elu_prime)
from .qr_solver import LinearPolicy, QuadraticBlock, eliminate, stack
from .residual import DecisionVector, ResidualBlocks, Weights, assemble, cost, gradient
from .sparsify import (PruneConfig, PruneLog, RemovalEstimate, TrainedPoint,
                       accept, estimate_removal, prune_loop, rank_candidates,
                       reduce_to_params, validation_cost)

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "parse_config", "MeasurementSet", "ingest", "Grid",
    "build_grid", "LMConfig", "SolveResult", "default_b0", "lm_step_dense",
    "solve_dense", "Partition", "build_q", "build_r", "batch_forward",
    "chain_and_solve", "lm_step_parallel", "make_partition", "solve_parallel",
    "CallbackMap", "EluNetwork", "ExogenousSignal", "PolynomialNetwork",
    "SelectionMap", "SystemModel", "elu", "elu_prime", "LinearPolicy",
    "QuadraticBlock", "eliminate", "stack", "DecisionVector", "ResidualBlocks",
    "Weights", "assemble", "cost", "gradient", "PruneConfig", "PruneLog",
    "RemovalEstimate", "TrainedPoint", "accept", "estimate_removal",
    "prune_loop", "rank_candidates", "reduce_to_params", "validation_cost",
]
