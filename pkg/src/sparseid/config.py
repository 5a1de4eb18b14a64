"""Run configuration: a flat key = value text format, strictly validated.

Unknown keys are rejected. Values are numbers, names, or comma-separated
integer lists; '#' starts a comment.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # problem selection: a builtin experiment, or an explicit model
    experiment: Optional[str] = None      # lorenz-full | lorenz-partial | vanderpol | vanderpol-desk
    model: Optional[str] = None           # polynomial | feedforward-elu
    n_x: Optional[int] = None
    poly_degree: int = 2
    elu_layers: tuple = ()
    f_phys: str = "zero"                  # zero | vanderpol-known
    # discretization and weighting
    dt_max: Optional[float] = None
    w_x: float = 1.0
    w_y: float = 1.0
    mu_x: float = 0.0
    mu_a: float = 0.0
    # solver settings
    lambda0: float = 1e-2
    rho1: float = 2.0
    rho2: float = 3.0
    sigma: Optional[float] = None
    max_iters: int = 500
    lambda_max: float = 1e12
    n_batches: Optional[int] = None
    workers: int = 1
    # sparsification
    criterion: str = "aic"                # aic | bic | cost-limit | cross-validation
    kappa: float = 1.05
    staging: str = "none"                 # none | by-degree
    validation_fraction: float = 0.0      # contiguous tail share for cross-validation
    max_removals: Optional[int] = None
    # reproducibility and paths
    seed: int = 0
    data: Optional[str] = None
    out: str = "out"

    def validate(self):
        from .experiments import BUILTIN_SPECS
        if self.experiment is not None and self.experiment not in BUILTIN_SPECS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose from {sorted(BUILTIN_SPECS)}")
        if self.experiment is None:
            if self.model not in ("polynomial", "feedforward-elu"):
                raise ConfigError("without an experiment, model must be "
                                  "'polynomial' or 'feedforward-elu'")
            if not self.n_x or self.n_x < 1:
                raise ConfigError("n_x must be a positive integer")
            if self.dt_max is None:
                raise ConfigError("dt_max is required")
            if self.model == "feedforward-elu" and len(self.elu_layers) < 2:
                raise ConfigError("elu_layers must list at least input and output sizes")
        for name in ("w_x", "w_y", "lambda0", "lambda_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("mu_x", "mu_a", "validation_fraction"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.dt_max is not None and self.dt_max <= 0:
            raise ConfigError("dt_max must be positive")
        if not (self.rho2 >= self.rho1 > 1):
            raise ConfigError("need rho2 >= rho1 > 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.workers < 0:
            raise ConfigError("workers must be nonnegative (0 = auto)")
        if self.n_batches is not None and self.n_batches < 1:
            raise ConfigError("n_batches must be positive")
        if self.criterion not in ("aic", "bic", "cost-limit", "cross-validation"):
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.criterion == "cost-limit" and self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.criterion == "cross-validation" and not (0 < self.validation_fraction < 1):
            raise ConfigError("cross-validation needs 0 < validation_fraction < 1")
        if self.staging not in ("none", "by-degree"):
            raise ConfigError(f"unknown staging rule {self.staging!r}")
        if self.max_removals is not None and self.max_removals < 0:
            raise ConfigError("max_removals must be nonnegative")
        return self


_INT_FIELDS = {"n_x", "poly_degree", "max_iters", "workers", "seed",
               "max_removals"}
_OPT_INT = {"n_batches"}
_FLOAT_FIELDS = {"dt_max", "w_x", "w_y", "mu_x", "mu_a", "lambda0", "rho1",
                 "rho2", "sigma", "lambda_max", "kappa", "validation_fraction"}
_TUPLE_FIELDS = {"elu_layers"}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_FIELDS:
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if key in _INT_FIELDS or key in _OPT_INT:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    return raw


def parse_config(path) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values).validate()
