"""Command-line pipeline: ingest data and a run configuration, execute
train -> sparsify -> report, and export all artifacts as CSV/JSON files.

Subcommands: fit (train only), prune (train + sparsify), simulate (roll out
an identified model), validate-config.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import experiments
from .config import ConfigError, RunConfig, parse_config
from .data import MeasurementSet, ingest
from .grid import build_grid
from .lm_dense import LMConfig, default_b0
from .lm_parallel import default_n_batches, solve_parallel
from .model import (EluNetwork, PolynomialNetwork, SelectionMap, SystemModel,
                    network_from_dict, network_to_dict)
from .residual import Weights, split_b
from .sparsify import PruneConfig, prune_loop
from .experiments import BUILTIN_SPECS, build_model, build_weights, rk4_path


def _resolve_workers(requested: int) -> int:
    if requested == 0:
        return os.cpu_count() or 1
    return requested


def _load_problem(cfg: RunConfig, data_path=None, out_dir=None, seed=None):
    """Measurement set, model, weights, and step size for a run."""
    seed = cfg.seed if seed is None else seed
    if cfg.experiment is not None:
        spec = BUILTIN_SPECS[cfg.experiment]()
        if cfg.dt_max is not None:
            spec.dt_max = cfg.dt_max
        spec.w_x, spec.w_y = cfg.w_x, cfg.w_y
        spec.mu_x, spec.mu_a = cfg.mu_x, cfg.mu_a
        path = data_path or cfg.data
        if path:
            mset = ingest(path)
        else:
            mset, _, _ = experiments.generate(spec, seed=seed)
            if out_dir is not None:
                data_mod.write_csv(os.path.join(out_dir, "data.csv"), mset)
        model = build_model(spec, mset)
        weights = build_weights(spec)
        return mset, model, weights, spec.dt_max
    path = data_path or cfg.data
    if not path:
        raise ConfigError("data path is required without a builtin experiment")
    mset = ingest(path)
    by_time = {float(t): comps for t, comps in zip(mset.times, mset.channels)}
    h = SelectionMap(cfg.n_x, by_time=by_time)
    if cfg.model == "polynomial":
        net = PolynomialNetwork(cfg.n_x, cfg.poly_degree, cfg.n_x)
    else:
        net = EluNetwork(cfg.elu_layers)
    from .experiments import _f_phys_batched, _jac_phys_batched
    model = SystemModel(n_x=cfg.n_x, h=h, f_phys=_f_phys_batched(cfg.f_phys),
                        jac_phys=_jac_phys_batched(cfg.f_phys), network=net)
    weights = Weights.isotropic(cfg.n_x, cfg.n_x, cfg.w_x, cfg.w_y,
                                mu_x=cfg.mu_x, mu_a=cfg.mu_a)
    return mset, model, weights, cfg.dt_max


def write_model_json(path, model: SystemModel, f_phys_name: str):
    doc = {"n_x": model.n_x, "f_phys": f_phys_name,
           "network": network_to_dict(model.network) if model.network else None}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_model_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    net = network_from_dict(doc["network"]) if doc["network"] else None
    from .experiments import _f_phys_batched, _jac_phys_batched
    name = doc["f_phys"]
    h = SelectionMap(doc["n_x"], components=tuple(range(doc["n_x"])))
    model = SystemModel(n_x=doc["n_x"], h=h, f_phys=_f_phys_batched(name),
                        jac_phys=_jac_phys_batched(name), network=net)
    return model, name


def write_states_csv(path, grid, states):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(states.shape[1])])
        for t, row in zip(grid.t, states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def write_history_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "cost", "lambda", "accepted"])
        for k, (c, lam, acc) in enumerate(zip(result.cost_history,
                                              result.lambda_history,
                                              result.accepted)):
            w.writerow([k, repr(float(c)), repr(float(lam)), int(acc)])


def _train(cfg: RunConfig, mset, model, weights, dt_max, workers):
    grid = build_grid(mset.times, dt_max)
    b0 = default_b0(model, grid, mset, seed=cfg.seed)
    n_batches = cfg.n_batches or default_n_batches(grid.n_points, workers)
    lm_cfg = LMConfig(lambda0=cfg.lambda0, rho1=cfg.rho1, rho2=cfg.rho2,
                      sigma=cfg.sigma, max_iters=cfg.max_iters,
                      lambda_max=cfg.lambda_max)
    result = solve_parallel(model, grid, mset, weights, b0, config=lm_cfg,
                            n_batches=n_batches, workers=workers)
    return grid, result, lm_cfg, n_batches


def _report_lines(cfg, grid, model, result, prune_outcome=None):
    lines = [
        "sparseid run report",
        f"seed = {cfg.seed}",
        f"grid points = {grid.n_points}",
        f"termination = {result.termination}",
        f"iterations = {result.n_iters}",
        f"final cost = {result.cost!r}",
        f"gradient norm = {result.grad_norm!r}",
    ]
    net = (prune_outcome.model.network if prune_outcome is not None
           else model.network)
    if net is not None:
        lines.append(f"active edges = {net.n_active} of {int(net.is_weight.sum())}")
        lines.append(f"active parameters = {int(net.mask.sum())} of {net.n_params}")
        dead = net.dead_neurons()
        if dead:
            lines.append(f"dead neurons = {len(dead)}")
    if prune_outcome is not None:
        lines.append(f"pruning criterion = {cfg.criterion}")
        lines.append(f"pruning rounds = {len(prune_outcome.log.records)}")
        removed = sum(1 for r in prune_outcome.log.records if r.accepted)
        lines.append(f"edges removed = {removed}")
        lines.append(f"pruned cost = {prune_outcome.cost!r}")
    return lines


def _finish_fit(cfg, out, grid, model, result, f_phys_name, prune_outcome=None):
    os.makedirs(out, exist_ok=True)
    final_model = prune_outcome.model if prune_outcome is not None else model
    final_b = prune_outcome.b if prune_outcome is not None else result.b
    states, params = split_b(final_b, model.n_x, grid.n_points)
    if final_model.network is not None:
        final_model.network.params = params.copy()
    write_model_json(os.path.join(out, "model.json"), final_model, f_phys_name)
    write_states_csv(os.path.join(out, "states.csv"), grid, states)
    write_history_csv(os.path.join(out, "history.csv"), result)
    if prune_outcome is not None:
        prune_outcome.log.to_csv(os.path.join(out, "prune_log.csv"))
    lines = _report_lines(cfg, grid, model, result, prune_outcome)
    diverged = result.termination == "lambda_max" or not np.isfinite(result.cost)
    if diverged:
        lines.append("status = PARTIAL (solver did not converge)")
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 1 if diverged else 0


def _split_validation(mset: MeasurementSet, fraction: float):
    """Contiguous time-block split: the leading block trains, the tail
    validates (states are temporally coupled, so no random splits)."""
    n_train = max(2, int(round(mset.n_times * (1.0 - fraction))))
    n_train = min(n_train, mset.n_times - 2)
    train = MeasurementSet(times=mset.times[:n_train],
                           channels=mset.channels[:n_train],
                           values=mset.values[:n_train])
    val = MeasurementSet(times=mset.times[n_train:],
                         channels=mset.channels[n_train:],
                         values=mset.values[n_train:])
    return train, val


def cmd_fit(args) -> int:
    cfg = parse_config(args.config)
    _apply_cli_overrides(cfg, args)
    workers = _resolve_workers(cfg.workers)
    os.makedirs(args.out or cfg.out, exist_ok=True)
    out = args.out or cfg.out
    mset, model, weights, dt_max = _load_problem(cfg, args.data, out)
    if args.dry_run:
        grid = build_grid(mset.times, dt_max)
        print(f"config ok: {mset.n_times} measurement times, "
              f"{mset.n_scalars} scalars, grid points = {grid.n_points}")
        return 0
    grid, result, _, _ = _train(cfg, mset, model, weights, dt_max, workers)
    f_phys_name = _f_phys_name(cfg)
    return _finish_fit(cfg, out, grid, model, result, f_phys_name)


def cmd_prune(args) -> int:
    cfg = parse_config(args.config)
    _apply_cli_overrides(cfg, args)
    workers = _resolve_workers(cfg.workers)
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    mset, model, weights, dt_max = _load_problem(cfg, args.data, out)
    if args.dry_run:
        grid = build_grid(mset.times, dt_max)
        print(f"config ok: {mset.n_times} measurement times, "
              f"{mset.n_scalars} scalars, grid points = {grid.n_points}")
        return 0
    val_set = None
    if cfg.criterion == "cross-validation":
        mset, val_set = _split_validation(mset, cfg.validation_fraction)
    grid, result, lm_cfg, n_batches = _train(cfg, mset, model, weights, dt_max, workers)
    # retrains stop at the same absolute tolerance that ended training
    sigma = lm_cfg.sigma if lm_cfg.sigma is not None else \
        1e-6 * (1.0 + _initial_grad_norm(model, grid, mset, weights, cfg))
    retrain_cfg = LMConfig(lambda0=cfg.lambda0, rho1=cfg.rho1, rho2=cfg.rho2,
                           sigma=sigma, max_iters=cfg.max_iters,
                           lambda_max=cfg.lambda_max)
    pcfg = PruneConfig(criterion=cfg.criterion, kappa=cfg.kappa,
                       staging=cfg.staging, n_batches=n_batches,
                       workers=workers, max_removals=cfg.max_removals,
                       validation=val_set, val_dt_max=dt_max)
    outcome = prune_loop(model, grid, mset, weights, result.b, retrain_cfg, pcfg)
    return _finish_fit(cfg, out, grid, model, result, _f_phys_name(cfg), outcome)


def _initial_grad_norm(model, grid, mset, weights, cfg) -> float:
    from .residual import assemble
    b0 = default_b0(model, grid, mset, seed=cfg.seed)
    return float(np.linalg.norm(assemble(model, grid, mset, weights, b0).gradient()))


def _f_phys_name(cfg: RunConfig) -> str:
    if cfg.experiment is not None:
        return BUILTIN_SPECS[cfg.experiment]().f_phys_name
    return cfg.f_phys


def _apply_cli_overrides(cfg: RunConfig, args):
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()


def cmd_simulate(args) -> int:
    model, _ = read_model_json(args.model)
    x0 = np.asarray([float(v) for v in args.x0.split(",")], dtype=float)
    if x0.size != model.n_x:
        print(f"error: x0 has {x0.size} components, model has {model.n_x}",
              file=sys.stderr)
        return 2
    params = model.network.params if model.network is not None else np.zeros(0)

    def rhs(t, x):
        return model.eval_f(t, x, params)

    n = int(np.ceil((args.t1 - args.t0) / args.dt - 1e-12))
    times = args.t0 + (args.t1 - args.t0) * np.arange(n + 1) / n
    path = rk4_path(rhs, x0, times, args.dt)
    if not np.all(np.isfinite(path)):
        bad = int(np.nonzero(~np.isfinite(path).all(axis=1))[0][0])
        print(f"error: state became non-finite at t = {times[bad]!r}", file=sys.stderr)
        return 1
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(model.n_x)])
        for t, row in zip(times, path):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    print(f"wrote {args.out} ({times.size} rows)")
    return 0


def cmd_validate_config(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 2
    print("config ok")
    for key, val in sorted(vars(cfg).items()):
        print(f"  {key} = {val}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sparseid",
        description="Sparse identification of ODE systems with network pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--data", help="long-format CSV (time,channel,value)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker processes (0 = auto)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--dry-run", action="store_true",
                       help="validate inputs and print the grid size only")

    p_fit = sub.add_parser("fit", help="train the model on the data")
    common(p_fit)
    p_prune = sub.add_parser("prune", help="train, then sparsify the network")
    common(p_prune)
    p_sim = sub.add_parser("simulate", help="roll out an identified model")
    p_sim.add_argument("--model", required=True, help="model.json path")
    p_sim.add_argument("--x0", required=True, help="comma-separated initial state")
    p_sim.add_argument("--t0", type=float, default=0.0)
    p_sim.add_argument("--t1", type=float, required=True)
    p_sim.add_argument("--dt", type=float, default=1e-3)
    p_sim.add_argument("--out", required=True, help="trajectory CSV path")
    p_val = sub.add_parser("validate-config", help="check a configuration file")
    p_val.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "prune":
            return cmd_prune(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_validate_config(args)
    except (ConfigError, data_mod.IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
