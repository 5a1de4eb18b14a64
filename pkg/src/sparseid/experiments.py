"""Ground-truth generators and benchmark definitions: the chaotic Lorenz
system (full and partial state measurements) and a forced Van der Pol
oscillator, with seeded Gaussian measurement noise.

Truth trajectories are integrated with fixed-step RK4 at a step one decade
below the identification grid, so generator error is negligible relative to
the noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import MeasurementSet
from .model import EluNetwork, PolynomialNetwork, SelectionMap, SystemModel
from .residual import Weights

LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0

VDP_A = 1.0
VDP_MU = 1.0
VDP_OMEGA = 0.2


def rk4_step(f: Callable, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_path(f: Callable, x0, times, dt: float) -> np.ndarray:
    """Integrate through the given times exactly, with internal steps <= dt."""
    times = np.asarray(times, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((times.size, x.size))
    out[0] = x
    for i in range(times.size - 1):
        gap = times[i + 1] - times[i]
        n = max(1, int(np.ceil(gap / dt - 1e-12)))
        h = gap / n
        t = times[i]
        for _ in range(n):
            x = rk4_step(f, t, x, h)
            t += h
        out[i + 1] = x
    return out


def lorenz_rhs(t: float, x: np.ndarray) -> np.ndarray:
    return np.array([LORENZ_SIGMA * (x[1] - x[0]),
                     x[0] * (LORENZ_RHO - x[2]) - x[1],
                     -LORENZ_BETA * x[2] + x[0] * x[1]])


def vanderpol_rhs(t: float, x: np.ndarray) -> np.ndarray:
    return np.array([x[1],
                     VDP_A * np.sin(VDP_OMEGA * t) - x[0]
                     + VDP_MU * (1.0 - x[0] ** 2) * x[1]])


@dataclass
class ExperimentSpec:
    """A benchmark: truth system, measurement schedule, noise level, and the
    identification setup (known part, network family, weights, step size)."""

    name: str
    n_x: int
    truth_rhs: Callable
    x0: np.ndarray
    t_end: float
    schedules: list               # (components tuple, period)
    noise_var: float
    w_x: float
    w_y: float
    mu_x: float
    mu_a: float
    dt_max: float
    network: str                  # "polynomial" | "feedforward-elu"
    poly_degree: int = 2
    elu_layers: tuple = ()
    f_phys_name: str = "zero"     # zero | vanderpol-known
    truth_dt: float = 1e-4
    seed: int = 0

    def schedule_times(self):
        """Per-schedule sample times, rounded so overlapping schedules agree
        bit-exactly (all benchmark periods are short decimals)."""
        out = []
        for comps, period in self.schedules:
            n = int(round(self.t_end / period))
            out.append((tuple(comps), np.round(np.arange(n + 1) * period, 12)))
        return out


def lorenz_full_spec(**overrides) -> ExperimentSpec:
    spec = ExperimentSpec(
        name="lorenz-full", n_x=3, truth_rhs=lorenz_rhs,
        x0=np.array([-8.0, 7.0, 27.0]), t_end=4.8,
        schedules=[((0, 1), 0.3), ((2,), 0.4)], noise_var=1.0,
        w_x=10.0, w_y=1.0, mu_x=1e-8, mu_a=1e-3, dt_max=1e-3,
        network="polynomial", poly_degree=2)
    return _override(spec, overrides)


def lorenz_partial_spec(**overrides) -> ExperimentSpec:
    spec = ExperimentSpec(
        name="lorenz-partial", n_x=3, truth_rhs=lorenz_rhs,
        x0=np.array([-8.0, 7.0, 27.0]), t_end=5.0,
        schedules=[((0, 1), 0.01)], noise_var=1e-4,
        w_x=10.0, w_y=1.0, mu_x=1e-8, mu_a=1e-3, dt_max=1e-3,
        network="polynomial", poly_degree=2)
    return _override(spec, overrides)


def vanderpol_spec(**overrides) -> ExperimentSpec:
    spec = ExperimentSpec(
        name="vanderpol", n_x=2, truth_rhs=vanderpol_rhs,
        x0=np.array([1.0, 0.0]), t_end=100.0,
        schedules=[((0, 1), 0.1)], noise_var=0.01,
        w_x=1.0, w_y=1.0, mu_x=0.0, mu_a=1e-3, dt_max=1e-3,
        network="feedforward-elu", elu_layers=(2, 10, 10, 2),
        f_phys_name="vanderpol-known")
    return _override(spec, overrides)


def vanderpol_desk_spec(**overrides) -> ExperimentSpec:
    """Shortened window and coarser grid; same system and noise."""
    spec = vanderpol_spec(t_end=20.0, dt_max=0.05)
    spec.name = "vanderpol-desk"
    return _override(spec, overrides)


BUILTIN_SPECS = {
    "lorenz-full": lorenz_full_spec,
    "lorenz-partial": lorenz_partial_spec,
    "vanderpol": vanderpol_spec,
    "vanderpol-desk": vanderpol_desk_spec,
}


def _override(spec: ExperimentSpec, overrides: dict) -> ExperimentSpec:
    for key, val in overrides.items():
        if not hasattr(spec, key):
            raise ValueError(f"unknown experiment field {key!r}")
        setattr(spec, key, val)
    return spec


def generate(spec: ExperimentSpec, seed: Optional[int] = None):
    """Simulate the truth system and sample it on the measurement schedule
    with i.i.d. Gaussian noise. Returns (MeasurementSet, times, states) with
    the noise-free truth at every distinct measurement time."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    per_schedule = spec.schedule_times()
    all_times = np.unique(np.concatenate([ts for _, ts in per_schedule]))
    truth = rk4_path(spec.truth_rhs, spec.x0, all_times, spec.truth_dt)
    pos = {t: i for i, t in enumerate(all_times)}
    records = []
    for comps, ts in per_schedule:
        for t in ts:
            x = truth[pos[t]]
            for c in comps:
                noise = rng.normal(0.0, np.sqrt(spec.noise_var))
                records.append((t, c, x[c] + noise))
    return MeasurementSet.from_records(records), all_times, truth


def true_error(spec: ExperimentSpec, t, x) -> np.ndarray:
    """Closed-form discrepancy between the truth dynamics and the known part
    of the identification model, for scoring identified networks."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    tb = np.broadcast_to(np.asarray(t, dtype=float), (xb.shape[0],))
    full = np.stack([spec.truth_rhs(ti, xi) for ti, xi in zip(tb, xb)])
    known = _f_phys_batched(spec.f_phys_name)
    err = full - (known(tb, xb) if known is not None else 0.0)
    return err[0] if single else err


def _f_phys_batched(name: str):
    if name == "zero":
        return None
    if name == "vanderpol-known":
        def f(t, x):
            out = np.empty_like(x)
            out[:, 0] = x[:, 1]
            out[:, 1] = VDP_A * np.sin(VDP_OMEGA * t)
            return out
        return f
    raise ValueError(f"unknown known-dynamics name {name!r}")


def _jac_phys_batched(name: str):
    if name == "zero":
        return None
    if name == "vanderpol-known":
        def j(t, x):
            out = np.zeros((x.shape[0], 2, 2))
            out[:, 0, 1] = 1.0
            return out
        return j
    raise ValueError(f"unknown known-dynamics name {name!r}")


def build_model(spec: ExperimentSpec, mset: MeasurementSet) -> SystemModel:
    """Identification model for a benchmark, with the measurement schedule
    taken from the data."""
    if spec.network == "polynomial":
        net = PolynomialNetwork(spec.n_x, spec.poly_degree, spec.n_x)
    elif spec.network == "feedforward-elu":
        net = EluNetwork(spec.elu_layers)
    else:
        raise ValueError(f"unknown network family {spec.network!r}")
    by_time = {float(t): comps for t, comps in zip(mset.times, mset.channels)}
    h = SelectionMap(spec.n_x, by_time=by_time)
    return SystemModel(n_x=spec.n_x, h=h,
                       f_phys=_f_phys_batched(spec.f_phys_name),
                       jac_phys=_jac_phys_batched(spec.f_phys_name),
                       network=net)


def build_weights(spec: ExperimentSpec) -> Weights:
    return Weights.isotropic(spec.n_x, spec.n_x, spec.w_x, spec.w_y,
                             mu_x=spec.mu_x, mu_a=spec.mu_a)
