"""Benchmark PDE definitions: operators, exact solutions, derived sources.

Each problem couples a differential operator with a closed-form reference
solution written as a jet closure; the source term is obtained by applying
the operator to that closure, so the reference solution satisfies the
discrete residual identically and no hand-derived source formulas enter the
library (they appear only as test oracles).

All problems live on the cube [-1, 1]^D. The parametric Burgers system is
posed on [0,1]^3 x [nu_min, 1] in physical coordinates (x, y, t, nu) and is
affinely identified with the cube, viscosity included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Jet, Var, value_of, take, concat, vsum
from .network import AnalyticFunction, DiffResult

NU_MIN = 0.01  # smallest Burgers viscosity, mapped from the nu-coordinate -1

__all__ = ["ProblemSpec", "get_problem", "PROBLEM_NAMES", "residual",
           "boundary_residual", "exact_solution", "source", "residual_squared",
           "sample_domain", "sample_boundary"]


@dataclass
class ProblemSpec:
    name: str
    dim: int
    n_outputs: int
    operator: callable  # (DiffResult, points) -> (n, n_outputs)
    exact: AnalyticFunction
    error_metric: str  # "grid_mse" or "rel_l2"
    order: int = 2


def _check_points(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected points of shape (n, {dim}), got {x.shape}")
    if np.any(np.abs(x) > 1.0):
        raise ValueError("point outside the closed domain")
    return x


def residual(problem, net, x, params=None):
    """Pointwise PDE defect of the network (or closure) at interior points."""
    x = _check_points(x, problem.dim)
    d = net.derivatives(x, order=problem.order, params=params)
    return problem.operator(d, x) - source(problem, x)


def source(problem, x):
    """Source term: the operator applied to the reference solution."""
    x = _check_points(x, problem.dim)
    d = problem.exact.derivatives(x, order=problem.order)
    return problem.operator(d, x)


def exact_solution(problem, x):
    x = _check_points(x, problem.dim)
    return problem.exact.derivatives(x, order=0).value


def boundary_residual(problem, net, x_b, params=None):
    """Dirichlet defect u(x_b) - g(x_b); x_b must lie on a face."""
    x_b = _check_points(x_b, problem.dim)
    on_face = np.abs(np.abs(x_b).max(axis=1) - 1.0) <= 1e-12
    if not np.all(on_face):
        raise ValueError("boundary point not on the domain boundary")
    d = net.derivatives(x_b, order=0, params=params)
    return d.value - exact_solution(problem, x_b)


def residual_squared(problem, net, x, params=None):
    """Squared residual per point, components summed for systems."""
    r = residual(problem, net, x, params=params)
    if isinstance(r, Var):
        return vsum(r * r, axis=1)
    return (r * r).sum(axis=1)


def sample_domain(problem, n, rng):
    """Uniform interior points."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    return rng.uniform(-1.0, 1.0, size=(n, problem.dim))


def sample_boundary(problem, n, rng):
    """Uniform points on the boundary: face chosen uniformly, then uniform."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    dim = problem.dim
    x = rng.uniform(-1.0, 1.0, size=(n, dim))
    face = rng.integers(0, 2 * dim, size=n)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    x[np.arange(n), axis] = sign
    return x


# -- helpers over DiffResult fields ----------------------------------------


def _col(a, j):
    """Column j of a (n, k) value as (n, 1)."""
    sel = (slice(None), slice(j, j + 1))
    return take(a, sel) if isinstance(a, Var) else a[sel]


def _deriv(g, i, j):
    """Entry (direction i, output j) of a (n, D, k) array as (n, 1)."""
    sel = (slice(None), i, slice(j, j + 1))
    return take(g, sel) if isinstance(g, Var) else g[sel]


def _laplacian(d):
    h = d.hess_diag
    return vsum(h, axis=1) if isinstance(h, Var) else h.sum(axis=1)


# -- one peak ---------------------------------------------------------------


def _one_peak_exact(j):
    dx = j - np.array([0.5, 0.5])
    return (dx.square().sum_features() * (-1000.0)).exp()


def _one_peak_operator(d, x):
    return -1.0 * _laplacian(d)


# -- two peaks ---------------------------------------------------------------


def _two_peak_exact(j):
    a = ((j - np.array([0.5, 0.5])).square().sum_features() * (-1000.0)).exp()
    b = ((j + np.array([0.5, 0.5])).square().sum_features() * (-1000.0)).exp()
    return a + b


def _two_peak_operator(d, x):
    # -div(u grad(v)) + lap(u) with v = |x|^2:
    #   -2 x.grad(u) - 4 u + lap(u)
    g = d.gradient
    xg = _deriv(g, 0, 0) * x[:, 0:1] + _deriv(g, 1, 0) * x[:, 1:2]
    return -2.0 * xg - 4.0 * d.value + _laplacian(d)


# -- 10-dimensional nonlinear ------------------------------------------------


def _nl10d_exact(j):
    return (j.square().sum_features() * (-10.0)).exp()


def _nl10d_operator(d, x):
    u = d.value
    return -1.0 * _laplacian(d) + u - u * u * u


# -- parametric Burgers system ------------------------------------------------


def _burgers_physical(j):
    """Map cube coordinates to physical (x, y, t, nu) jets."""
    x = (j.col([0]) + 1.0) * 0.5
    y = (j.col([1]) + 1.0) * 0.5
    t = (j.col([2]) + 1.0) * 0.5
    nu = (j.col([3]) + 1.0) * (0.5 * (1.0 - NU_MIN)) + NU_MIN
    return x, y, t, nu


def _burgers_exact(j):
    x, y, t, nu = _burgers_physical(j)
    phi = (x * (-4.0) + y * 4.0 - t) / (nu * 32.0)
    w = (-phi).sigmoid()  # 1 / (1 + exp(phi))
    u = 0.75 - w * 0.25
    v = 0.75 + w * 0.25
    return Jet.cat([u, v])


def _burgers_nu(x):
    return NU_MIN + (x[:, 3:4] + 1.0) * 0.5 * (1.0 - NU_MIN)


def _burgers_operator(d, x):
    # physical derivative = cube derivative * 2 (and * 4 for second order);
    # the nu-direction never enters the operator
    nu = _burgers_nu(x)
    u, v = _col(d.value, 0), _col(d.value, 1)
    out = []
    for j in range(2):  # both component equations share the advection (u, v)
        w_x = _deriv(d.gradient, 0, j) * 2.0
        w_y = _deriv(d.gradient, 1, j) * 2.0
        w_t = _deriv(d.gradient, 2, j) * 2.0
        w_xx = _deriv(d.hess_diag, 0, j) * 4.0
        w_yy = _deriv(d.hess_diag, 1, j) * 4.0
        out.append(w_t + u * w_x + v * w_y - nu * (w_xx + w_yy))
    if isinstance(out[0], Var) or isinstance(out[1], Var):
        return concat(out, axis=-1)
    return np.concatenate(out, axis=-1)


# -- registry -----------------------------------------------------------------


def _build_problems():
    return {
        "one_peak": ProblemSpec(
            "one_peak", 2, 1, _one_peak_operator,
            AnalyticFunction(_one_peak_exact, 2), "grid_mse"),
        "two_peak": ProblemSpec(
            "two_peak", 2, 1, _two_peak_operator,
            AnalyticFunction(_two_peak_exact, 2), "grid_mse"),
        "nl10d": ProblemSpec(
            "nl10d", 10, 1, _nl10d_operator,
            AnalyticFunction(_nl10d_exact, 10), "rel_l2"),
        "burgers4d": ProblemSpec(
            "burgers4d", 4, 2, _burgers_operator,
            AnalyticFunction(_burgers_exact, 4, out_dim=2), "rel_l2"),
    }


_PROBLEMS = _build_problems()
PROBLEM_NAMES = tuple(sorted(_PROBLEMS))


def get_problem(name):
    try:
        return _PROBLEMS[name]
    except KeyError:
        raise ValueError(
            f"unknown problem {name!r}; choose one of {', '.join(PROBLEM_NAMES)}"
        ) from None
