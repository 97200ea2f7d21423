"""Small tanh MLP with value, input-derivative and parameter-gradient support.

Input derivatives come from jet propagation: each layer maps the triple
(value, gradient, diagonal second derivative) forward, so Laplacians cost a
constant factor over plain evaluation. Parameter gradients of losses built
from these quantities come from the reverse tape in :mod:`aaspde.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Jet, Var, parameter_gradient, value_of  # noqa: F401

__all__ = ["SolutionNet", "DiffResult", "AnalyticFunction",
           "evaluate", "input_derivatives", "parameter_gradient"]


@dataclass
class DiffResult:
    """Per-point value (n, k), gradient (n, D, k), second diagonal (n, D, k)."""

    value: np.ndarray
    gradient: np.ndarray = None
    hess_diag: np.ndarray = None

    @property
    def laplacian(self):
        return vsum_axis1(self.hess_diag)


def vsum_axis1(x):
    from .autodiff import vsum
    return vsum(x, axis=1) if isinstance(x, Var) else x.sum(axis=1)


class SolutionNet:
    """Fully connected network: tanh hidden layers, linear output."""

    def __init__(self, widths, weights, biases):
        if len(weights) != len(widths) - 1 or len(biases) != len(weights):
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} shape mismatch")
        self.widths = list(widths)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, widths, rng, scheme="uniform"):
        """Zero-mean init scaled by 1/sqrt(fan_in); zero biases."""
        weights, biases = [], []
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            scale = 1.0 / np.sqrt(max(fan_in, 1))
            if scheme == "uniform":
                w = rng.uniform(-np.sqrt(3.0) * scale, np.sqrt(3.0) * scale,
                                size=(widths[i], widths[i + 1]))
            elif scheme == "normal":
                w = rng.normal(0.0, scale, size=(widths[i], widths[i + 1]))
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            weights.append(w)
            biases.append(np.zeros(widths[i + 1]))
        return cls(widths, weights, biases)

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def params(self):
        """Flat parameter list (weights then biases, layer by layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_params(self, params):
        """New net with the same shape and the given flat parameter list."""
        ws = [np.asarray(params[2 * i]) for i in range(len(self.weights))]
        bs = [np.asarray(params[2 * i + 1]) for i in range(len(self.weights))]
        return SolutionNet(self.widths, ws, bs)

    def apply_jet(self, jet, params=None):
        """Propagate a jet through the network; params may be taped Vars."""
        ps = params if params is not None else self.params()
        n_layers = len(self.weights)
        h = jet
        for i in range(n_layers):
            w, b = ps[2 * i], ps[2 * i + 1]
            h = h.matmul(w) + _row(b)
            if i < n_layers - 1:
                h = h.tanh()
        return h

    def derivatives(self, x, order=2, params=None):
        """Value and input derivatives at points x of shape (n, in_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"expected points of shape (n, {self.in_dim}), got {x.shape}")
        if order not in (0, 1, 2):
            raise ValueError("order must be 0, 1 or 2")
        return _stacked_forward(self, x, order, params)

    def __call__(self, x):
        return self.derivatives(x, order=0).value


def _row(b):
    from .autodiff import reshape
    if isinstance(b, Var):
        return reshape(b, (1, b.value.shape[0]))
    return b.reshape(1, -1)


# -- fused stacked propagation --------------------------------------------
#
# The jet components are stacked along axis 1 as rows [value, tan_1..tan_D,
# tan2_1..tan2_D], so each layer is one BLAS call plus a single fused
# elementwise block; the whole layer is recorded as one tape node with a
# hand-written reverse rule. apply_jet keeps the op-by-op generic path,
# which doubles as the cross-check for this one.


def _stacked_forward(net, x, order, params):
    from .autodiff import _make, take, value_of
    n, d = x.shape
    k = 1 + order * d
    s0 = np.zeros((n, k, d))
    s0[:, 0, :] = x
    if order >= 1:
        s0[:, 1:d + 1, :] = np.eye(d)
    ps = params if params is not None else net.params()
    n_layers = len(net.weights)
    s = s0
    for i in range(n_layers):
        s = _dense_stacked(s, ps[2 * i], ps[2 * i + 1], d, order,
                           activate=i < n_layers - 1)
    sv = value_of(s)
    if order == 0:
        val = take(s, (slice(None), 0)) if isinstance(s, Var) else sv[:, 0]
        return DiffResult(val)
    if isinstance(s, Var):
        val = take(s, (slice(None), 0))
        tan = take(s, (slice(None), slice(1, d + 1)))
        tan2 = take(s, (slice(None), slice(d + 1, k))) if order == 2 else None
    else:
        val, tan = sv[:, 0], sv[:, 1:d + 1]
        tan2 = sv[:, d + 1:k] if order == 2 else None
    return DiffResult(val, tan, tan2)


def _dense_stacked(s, w, b, d, order, activate):
    """One dense layer on a stacked jet; a single recorded tape operation."""
    from .autodiff import _make, value_of
    sv, wv, bv = value_of(s), value_of(w), value_of(b)
    sw = sv @ wv
    sw[:, 0, :] += bv
    if not activate:
        out = sw

        def vjp_s_lin(g):
            return g @ wv.T

        def vjp_w_lin(g):
            return sv.reshape(-1, sv.shape[-1]).T @ g.reshape(-1, g.shape[-1])

        def vjp_b_lin(g):
            return g[:, 0, :].sum(axis=0)

        return _make(out, (s, vjp_s_lin), (w, vjp_w_lin), (b, vjp_b_lin))

    h = sw[:, 0, :]
    t = np.tanh(h)
    d1 = 1.0 - t * t
    out = np.empty_like(sw)
    out[:, 0, :] = t
    if order >= 1:
        gh = sw[:, 1:d + 1, :]
        out[:, 1:d + 1, :] = d1[:, None, :] * gh
    if order == 2:
        hh = sw[:, d + 1:, :]
        d2 = -2.0 * t * d1
        out[:, d + 1:, :] = d2[:, None, :] * (gh * gh) + d1[:, None, :] * hh

    def backward_core(g):
        gv = g[:, 0, :]
        dt = gv.copy()
        dsw = np.empty_like(g)
        if order >= 1:
            gg = g[:, 1:d + 1, :]
            dt += (gg * gh).sum(axis=1) * (-2.0 * t)
            dsw[:, 1:d + 1, :] = d1[:, None, :] * gg
        if order == 2:
            gH = g[:, d + 1:, :]
            dt += (gH * (gh * gh)).sum(axis=1) * (6.0 * t * t - 2.0)
            dt += (gH * hh).sum(axis=1) * (-2.0 * t)
            dsw[:, 1:d + 1, :] += (2.0 * d2)[:, None, :] * gh * gH
            dsw[:, d + 1:, :] = d1[:, None, :] * gH
        dsw[:, 0, :] = dt * d1
        return dsw

    cache = {}

    def dsw_of(g):
        if id(g) not in cache:
            cache.clear()
            cache[id(g)] = backward_core(g)
        return cache[id(g)]

    def vjp_s(g):
        return dsw_of(g) @ wv.T

    def vjp_w(g):
        dsw = dsw_of(g)
        return sv.reshape(-1, sv.shape[-1]).T @ dsw.reshape(-1, dsw.shape[-1])

    def vjp_b(g):
        return dsw_of(g)[:, 0, :].sum(axis=0)

    return _make(out, (s, vjp_s), (w, vjp_w), (b, vjp_b))


def evaluate(net, x):
    """Forward pass; returns values of shape (n, out_dim)."""
    return net.derivatives(x, order=0).value


def input_derivatives(net, x, order):
    """Gradient and (order=2) second-derivative diagonal per point."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    return net.derivatives(x, order=order)


class AnalyticFunction:
    """Closed-form function exposed through the same derivative contract.

    ``fn`` maps a Jet of points (n, D) to a Jet of outputs (n, k); writing it
    with jet operations makes all derivatives exact by construction.
    """

    def __init__(self, fn, in_dim, out_dim=1):
        self.fn = fn
        self.in_dim = in_dim
        self.out_dim = out_dim

    def derivatives(self, x, order=2, params=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (n, {self.in_dim}) points, got {x.shape}")
        out = self.fn(Jet.seed(x, order))
        return DiffResult(out.val, out.tan, out.tan2)

    def __call__(self, x):
        return self.derivatives(x, order=0).value
