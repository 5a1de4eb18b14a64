"""Dynamical model f(t, x, a) = f_phys(t, x) + f_net(x, u(t), a), the
measurement map h, and the two built-in error-network families (polynomial,
ELU feedforward) with analytic Jacobians.

All evaluators are vectorized: time may be a scalar or shape (m,), states a
vector (n_x,) or batch (m, n_x). Evaluation is pure with respect to model
data, so models are safe to share across workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np


class ModelError(ValueError):
    pass


class InvalidCandidate(ValueError):
    """Raised when an edge operation addresses a bias or an inactive weight."""


def elu(z):
    """Exponential linear unit with unit shape parameter."""
    z = np.asarray(z, dtype=float)
    return np.where(z > 0, z, np.expm1(z))


def elu_prime(z):
    z = np.asarray(z, dtype=float)
    return np.where(z > 0, 1.0, np.exp(z))


def _as_batch(t, x, n_x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != n_x:
        raise ModelError(f"state has dimension {x.shape[1]}, expected {n_x}")
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return t, x, single


# ---------------------------------------------------------------------------
# error networks
# ---------------------------------------------------------------------------

def monomial_exponents(n_inputs: int, degree: int) -> np.ndarray:
    """Exponent rows of all monomials with total degree <= degree, graded
    lexicographic with the constant first. Count is C(n_inputs+degree, degree)."""
    rows = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(n_inputs), deg):
            e = np.zeros(n_inputs, dtype=int)
            for v in combo:
                e[v] += 1
            rows.append(e)
    return np.asarray(rows, dtype=int)


class PolynomialNetwork:
    """Single hidden layer of monomial neurons; each output is a linear
    combination of monomials. Every parameter is an edge weight (the constant
    monomial's gain plays the role of a bias and is prunable like any edge).
    """

    kind = "polynomial"

    def __init__(self, n_inputs: int, degree: int, n_outputs: int,
                 params: Optional[np.ndarray] = None,
                 mask: Optional[np.ndarray] = None):
        self.n_inputs = int(n_inputs)
        self.degree = int(degree)
        self.n_outputs = int(n_outputs)
        self.exponents = monomial_exponents(n_inputs, degree)
        self.n_features = self.exponents.shape[0]
        self.n_params = self.n_outputs * self.n_features
        self.params = np.zeros(self.n_params) if params is None \
            else np.asarray(params, dtype=float).copy()
        if self.params.shape != (self.n_params,):
            raise ModelError(f"expected {self.n_params} parameters")
        self.mask = np.ones(self.n_params, dtype=bool) if mask is None \
            else np.asarray(mask, dtype=bool).copy()
        # index of the monomial obtained by lowering input j in feature k
        key = {tuple(e): i for i, e in enumerate(self.exponents)}
        self._lower = np.full((self.n_features, self.n_inputs), -1, dtype=int)
        for k, e in enumerate(self.exponents):
            for j in range(self.n_inputs):
                if e[j] > 0:
                    low = e.copy()
                    low[j] -= 1
                    self._lower[k, j] = key[tuple(low)]

    # every parameter is a weight edge
    @property
    def is_weight(self) -> np.ndarray:
        return np.ones(self.n_params, dtype=bool)

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    def edge_description(self, index: int) -> tuple:
        """(layer, source, target) of a weight: source = monomial id,
        target = output component."""
        out, feat = divmod(int(index), self.n_features)
        return (0, feat, out)

    def features(self, v: np.ndarray) -> np.ndarray:
        phi = np.ones((v.shape[0], self.n_features))
        for k, e in enumerate(self.exponents):
            for j in np.nonzero(e)[0]:
                phi[:, k] *= v[:, j] ** e[j]
        return phi

    def _weights(self, a: np.ndarray) -> np.ndarray:
        w = np.where(self.mask, a, 0.0)
        return w.reshape(self.n_outputs, self.n_features)

    def forward(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self.features(v) @ self._weights(a).T

    def jac_inputs(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        m = v.shape[0]
        phi = self.features(v)
        dphi = np.zeros((m, self.n_features, self.n_inputs))
        for k, e in enumerate(self.exponents):
            for j in np.nonzero(e)[0]:
                dphi[:, k, j] = e[j] * phi[:, self._lower[k, j]]
        w = self._weights(a)
        return np.einsum("of,mfj->moj", w, dphi)

    def jac_params(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        m = v.shape[0]
        phi = self.features(v)
        jac = np.zeros((m, self.n_outputs, self.n_params))
        maskw = self.mask.reshape(self.n_outputs, self.n_features)
        for i in range(self.n_outputs):
            jac[:, i, i * self.n_features:(i + 1) * self.n_features] = phi * maskw[i]
        return jac

    def remove_edge(self, index: int) -> "PolynomialNetwork":
        _check_removable(self, index)
        mask = self.mask.copy()
        params = self.params.copy()
        mask[index] = False
        params[index] = 0.0
        return PolynomialNetwork(self.n_inputs, self.degree, self.n_outputs,
                                 params=params, mask=mask)

    def dead_neurons(self) -> list[tuple]:
        """Monomials with no remaining active outgoing edge."""
        maskw = self.mask.reshape(self.n_outputs, self.n_features)
        return [(0, int(k)) for k in range(self.n_features) if not maskw[:, k].any()]

    def feature_degree(self, index: int) -> int:
        """Total degree of the monomial feeding a weight edge."""
        _, feat, _ = self.edge_description(index)
        return int(self.exponents[feat].sum())


class EluNetwork:
    """Feedforward network with ELU hidden layers. Hidden layers carry
    biases; the output layer is a plain linear combination without bias.
    Parameter layout per layer: weights row-major, then the bias vector.
    """

    kind = "feedforward-elu"

    def __init__(self, layer_sizes, params: Optional[np.ndarray] = None,
                 mask: Optional[np.ndarray] = None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ModelError("need at least input and output layer sizes")
        self.n_inputs = self.layer_sizes[0]
        self.n_outputs = self.layer_sizes[-1]
        self.n_layers = len(self.layer_sizes) - 1

        # flat slices for each layer's weight block and bias block
        self._w_slices = []
        self._b_slices = []
        pos = 0
        is_weight = []
        for layer in range(self.n_layers):
            n_in = self.layer_sizes[layer]
            n_out = self.layer_sizes[layer + 1]
            self._w_slices.append(slice(pos, pos + n_out * n_in))
            is_weight.extend([True] * (n_out * n_in))
            pos += n_out * n_in
            if layer < self.n_layers - 1:  # hidden layers only
                self._b_slices.append(slice(pos, pos + n_out))
                is_weight.extend([False] * n_out)
                pos += n_out
            else:
                self._b_slices.append(None)
        self.n_params = pos
        self._is_weight = np.asarray(is_weight, dtype=bool)

        self.params = np.zeros(self.n_params) if params is None \
            else np.asarray(params, dtype=float).copy()
        if self.params.shape != (self.n_params,):
            raise ModelError(f"expected {self.n_params} parameters")
        if mask is None:
            mask = np.ones(self.n_params, dtype=bool)
        self.mask = np.asarray(mask, dtype=bool).copy()
        self.mask[~self._is_weight] = True  # biases are never masked

    @property
    def is_weight(self) -> np.ndarray:
        return self._is_weight

    @property
    def n_active(self) -> int:
        return int(self.mask[self._is_weight].sum())

    @property
    def n_edges(self) -> int:
        return int(self._is_weight.sum())

    def edge_description(self, index: int) -> tuple:
        """(layer, source, target) of a weight index."""
        for layer, sl in enumerate(self._w_slices):
            if sl.start <= index < sl.stop:
                n_in = self.layer_sizes[layer]
                tgt, src = divmod(index - sl.start, n_in)
                return (layer, src, tgt)
        raise InvalidCandidate(f"index {index} is not a weight")

    def _split(self, a: np.ndarray):
        a = np.where(self.mask, a, 0.0)
        ws, bs = [], []
        for layer in range(self.n_layers):
            n_in = self.layer_sizes[layer]
            n_out = self.layer_sizes[layer + 1]
            ws.append(a[self._w_slices[layer]].reshape(n_out, n_in))
            bsl = self._b_slices[layer]
            bs.append(a[bsl] if bsl is not None else None)
        return ws, bs

    def _forward_pass(self, v: np.ndarray, a: np.ndarray):
        ws, bs = self._split(a)
        acts = [v]
        zs = []
        h = v
        for layer in range(self.n_layers):
            z = h @ ws[layer].T
            if bs[layer] is not None:
                z = z + bs[layer]
                h = elu(z)
            else:
                h = z
            zs.append(z)
            acts.append(h)
        return ws, acts, zs

    def forward(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self._forward_pass(v, a)[1][-1]

    def jac_inputs(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        ws, acts, zs = self._forward_pass(v, a)
        m = v.shape[0]
        jac = np.broadcast_to(ws[-1], (m,) + ws[-1].shape).copy()
        for layer in range(self.n_layers - 2, -1, -1):
            jac = (jac * elu_prime(zs[layer])[:, None, :]) @ ws[layer]
        return jac

    def jac_params(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        ws, acts, zs = self._forward_pass(v, a)
        m = v.shape[0]
        jac = np.zeros((m, self.n_outputs, self.n_params))
        # sens = d out / d z_layer, built from the output layer downwards
        sens = np.broadcast_to(np.eye(self.n_outputs),
                               (m, self.n_outputs, self.n_outputs)).copy()
        for layer in range(self.n_layers - 1, -1, -1):
            jac[:, :, self._w_slices[layer]] = np.einsum(
                "moi,mj->moij", sens, acts[layer]).reshape(m, self.n_outputs, -1)
            if self._b_slices[layer] is not None:
                jac[:, :, self._b_slices[layer]] = sens
            if layer > 0:
                sens = (sens @ ws[layer]) * elu_prime(zs[layer - 1])[:, None, :]
        jac[:, :, ~self.mask] = 0.0
        return jac

    def remove_edge(self, index: int) -> "EluNetwork":
        _check_removable(self, index)
        mask = self.mask.copy()
        params = self.params.copy()
        mask[index] = False
        params[index] = 0.0
        return EluNetwork(self.layer_sizes, params=params, mask=mask)

    def dead_neurons(self) -> list[tuple]:
        """Hidden units with no active incoming or no active outgoing edges,
        as (layer, unit) with layer counting hidden layers from 0."""
        dead = []
        for layer in range(self.n_layers - 1):
            n_in = self.layer_sizes[layer]
            n_out = self.layer_sizes[layer + 1]
            w_in = self.mask[self._w_slices[layer]].reshape(n_out, n_in)
            nxt = self.layer_sizes[layer + 2]
            w_out = self.mask[self._w_slices[layer + 1]].reshape(nxt, n_out)
            for unit in range(n_out):
                if not w_in[unit].any() or not w_out[:, unit].any():
                    dead.append((layer, unit))
        return dead


def _check_removable(net, index: int):
    index = int(index)
    if not (0 <= index < net.n_params) or not net.is_weight[index]:
        raise InvalidCandidate(f"index {index} does not address a weight edge")
    if not net.mask[index]:
        raise InvalidCandidate(f"weight edge {index} is already inactive")


def network_to_dict(net) -> dict:
    d = {"kind": net.kind,
         "params": [float(p) for p in net.params],
         "mask": "".join("1" if m else "0" for m in net.mask)}
    if net.kind == "polynomial":
        d.update(n_inputs=net.n_inputs, degree=net.degree, n_outputs=net.n_outputs)
    else:
        d["layer_sizes"] = list(net.layer_sizes)
    return d


def network_from_dict(d: dict):
    params = np.asarray(d["params"], dtype=float)
    mask = np.asarray([c == "1" for c in d["mask"]], dtype=bool)
    if d["kind"] == "polynomial":
        return PolynomialNetwork(d["n_inputs"], d["degree"], d["n_outputs"],
                                 params=params, mask=mask)
    if d["kind"] == "feedforward-elu":
        return EluNetwork(d["layer_sizes"], params=params, mask=mask)
    raise ModelError(f"unknown network kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# exogenous signal and measurement maps
# ---------------------------------------------------------------------------

class ExogenousSignal:
    """Known time-varying inputs u(t), either closed form or interpolated."""

    def __init__(self, fn: Callable, n_u: int):
        self.fn = fn
        self.n_u = int(n_u)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        single = t.ndim == 0
        u = np.asarray(self.fn(np.atleast_1d(t)), dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape[1] != self.n_u:
            raise ModelError(f"u(t) returned dimension {u.shape[1]}, expected {self.n_u}")
        return u[0] if single else u

    @classmethod
    def from_samples(cls, ts, us) -> "ExogenousSignal":
        ts = np.asarray(ts, dtype=float)
        us = np.atleast_2d(np.asarray(us, dtype=float))
        if us.shape[0] == ts.size and us.ndim == 2:
            us = us.T  # accept (n_samples, n_u)

        def fn(t):
            return np.stack([np.interp(t, ts, us[i]) for i in range(us.shape[0])], axis=-1)

        return cls(fn, us.shape[0])


class MeasurementLookupError(KeyError):
    pass


class SelectionMap:
    """Measurement map selecting a subset of state components, either the
    same components at every time or a per-time schedule."""

    def __init__(self, n_x: int, components=None, by_time: Optional[dict] = None):
        self.n_x = int(n_x)
        if (components is None) == (by_time is None):
            raise ModelError("give either static components or a per-time schedule")
        self.static = tuple(int(c) for c in components) if components is not None else None
        self.by_time = {float(t): tuple(int(c) for c in comps)
                        for t, comps in by_time.items()} if by_time else None

    def components(self, t) -> tuple:
        if self.static is not None:
            return self.static
        key = float(t)
        if key not in self.by_time:
            raise MeasurementLookupError(f"no measurement scheduled at t={t!r}")
        return self.by_time[key]

    def eval(self, t, x: np.ndarray) -> np.ndarray:
        comps = self.components(t)
        return np.asarray(x, dtype=float)[..., list(comps)]

    def jac(self, t, x: np.ndarray) -> np.ndarray:
        comps = self.components(t)
        jac = np.zeros((len(comps), self.n_x))
        jac[np.arange(len(comps)), list(comps)] = 1.0
        return jac


class CallbackMap:
    """User-supplied measurement map h(t, x) with analytic Jacobian."""

    def __init__(self, n_x: int, h: Callable, jac_h: Callable):
        self.n_x = int(n_x)
        self._h = h
        self._jac = jac_h

    def components(self, t):
        return None

    def eval(self, t, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._h(t, np.asarray(x, dtype=float)), dtype=float)

    def jac(self, t, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._jac(t, np.asarray(x, dtype=float)), dtype=float)


# ---------------------------------------------------------------------------
# system model
# ---------------------------------------------------------------------------

@dataclass
class SystemModel:
    """Grey-box model: known dynamics plus an error network on (x, u(t)).

    f_phys and jac_phys are batched callables (t (m,), x (m, n_x)) or None
    for the zero model. The network input is x, optionally extended by u(t).
    """

    n_x: int
    h: object
    f_phys: Optional[Callable] = None
    jac_phys: Optional[Callable] = None
    network: object = None
    u: Optional[ExogenousSignal] = None

    @property
    def n_params(self) -> int:
        return self.network.n_params if self.network is not None else 0

    @property
    def n_u(self) -> int:
        return self.u.n_u if self.u is not None else 0

    def _net_inputs(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.u is None:
            return x
        return np.concatenate([x, self.u(t)], axis=1)

    def _check_a(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (self.n_params,):
            raise ModelError(f"parameter vector has shape {a.shape}, "
                             f"expected ({self.n_params},)")
        return a

    def eval_f(self, t, x, a) -> np.ndarray:
        a = self._check_a(a)
        t, xb, single = _as_batch(t, x, self.n_x)
        out = np.zeros_like(xb)
        if self.f_phys is not None:
            fp = np.asarray(self.f_phys(t, xb), dtype=float)
            if fp.shape != xb.shape:
                raise ModelError(f"f_phys returned shape {fp.shape}, expected {xb.shape}")
            out += fp
        if self.network is not None:
            out += self.network.forward(self._net_inputs(t, xb), a)
        return out[0] if single else out

    def jac_f_x(self, t, x, a) -> np.ndarray:
        a = self._check_a(a)
        t, xb, single = _as_batch(t, x, self.n_x)
        m = xb.shape[0]
        jac = np.zeros((m, self.n_x, self.n_x))
        if self.f_phys is not None:
            if self.jac_phys is None:
                raise ModelError("f_phys given without jac_phys")
            jac += np.asarray(self.jac_phys(t, xb), dtype=float)
        if self.network is not None:
            jn = self.network.jac_inputs(self._net_inputs(t, xb), a)
            jac += jn[:, :, :self.n_x]  # u(t) does not depend on x
        return jac[0] if single else jac

    def jac_f_a(self, t, x, a) -> np.ndarray:
        a = self._check_a(a)
        t, xb, single = _as_batch(t, x, self.n_x)
        m = xb.shape[0]
        if self.network is None:
            jac = np.zeros((m, self.n_x, 0))
        else:
            jac = self.network.jac_params(self._net_inputs(t, xb), a)
        return jac[0] if single else jac

    def eval_h(self, t_m, x) -> np.ndarray:
        return self.h.eval(t_m, x)

    def jac_h_x(self, t_m, x) -> np.ndarray:
        return self.h.jac(t_m, x)

    def with_network(self, network) -> "SystemModel":
        return replace(self, network=network)

    def frozen(self, a) -> "SystemModel":
        """Model with the network folded into the known dynamics at fixed
        parameter values; the result has no free parameters."""
        if self.network is None:
            return replace(self)
        a = self._check_a(a).copy()
        net, u, base_f, base_j = self.network, self.u, self.f_phys, self.jac_phys

        def f(t, xb):
            v = xb if u is None else np.concatenate([xb, u(t)], axis=1)
            out = net.forward(v, a)
            if base_f is not None:
                out = out + np.asarray(base_f(t, xb), dtype=float)
            return out

        def j(t, xb):
            v = xb if u is None else np.concatenate([xb, u(t)], axis=1)
            out = net.jac_inputs(v, a)[:, :, :xb.shape[1]]
            if base_f is not None:
                if base_j is None:
                    raise ModelError("f_phys given without jac_phys")
                out = out + np.asarray(base_j(t, xb), dtype=float)
            return out

        return SystemModel(n_x=self.n_x, h=self.h, f_phys=f, jac_phys=j,
                           network=None, u=None)
