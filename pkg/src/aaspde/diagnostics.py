"""Quantitative instruments: error metrics, residual statistics, transport
distances, the optimal-density elliptic oracle and density bounds.

The sliced Wasserstein estimator averages exact one-dimensional transport
distances over random projections. On this domain the bounded metric
min{M, |x - y|} coincides with the Euclidean one whenever M >= 2 sqrt(D),
the cube diameter, so plain W1 numbers are reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import spsolve

from . import flow as fl
from . import problems as pb

__all__ = ["MetricRecord", "ResidualDistribution", "grid_mse",
           "relative_l2_error", "solution_error", "residual_variance",
           "sliced_wasserstein", "w1_exact_1d", "residual_to_distribution",
           "resample_distribution", "residual_uniform_distance",
           "optimal_density_oracle", "density_functional",
           "lipschitz_density_bound", "density_bound_check"]


@dataclass
class MetricRecord:
    """One per-stage row of the training history."""

    stage: int
    min_loss: float
    boundary_loss: float
    max_objective: float
    error: float
    var_r2: float
    sliced_w: float
    beta: float
    wallclock_s: float


@dataclass
class ResidualDistribution:
    """Renormalized squared-residual weights over a sample set."""

    points: np.ndarray
    r_squared: np.ndarray
    normalization: float  # mean(r^2) * |domain|, the density normalizer
    weights: np.ndarray


# -- error metrics ----------------------------------------------------------


def grid_mse(net, problem, n=256):
    """Mean squared error against the reference on an n x n grid (2-D only)."""
    if problem.dim != 2:
        raise ValueError("grid error is defined for two-dimensional problems")
    g = np.linspace(-1.0, 1.0, n)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    diff = net.derivatives(pts, order=0).value - pb.exact_solution(problem, pts)
    return float((diff**2).mean())


def relative_l2_error(net, problem, n_test, rng):
    """||u_net - u|| / ||u|| over fresh uniform test points."""
    if n_test < 1:
        raise ValueError("need n_test >= 1")
    pts = pb.sample_domain(problem, n_test, rng)
    ref = pb.exact_solution(problem, pts)
    denom = np.sqrt((ref**2).sum())
    if denom == 0.0:
        raise ValueError("reference solution vanishes on the test sample")
    diff = net.derivatives(pts, order=0).value - ref
    return float(np.sqrt((diff**2).sum()) / denom)


def solution_error(net, problem, rng, n_test=10_000):
    """Problem's own error metric: grid MSE or relative L2."""
    if problem.error_metric == "grid_mse":
        return grid_mse(net, problem)
    return relative_l2_error(net, problem, n_test, rng)


def residual_variance(net, problem, samples):
    """Unbiased sample variance of r^2 over the given points."""
    samples = np.asarray(samples)
    if len(samples) < 2:
        raise ValueError("need at least two samples for a variance")
    r2 = pb.residual_squared(problem, net, samples)
    return float(r2.var(ddof=1))


# -- transport distances -----------------------------------------------------


def _w1_sorted_uniform(a, b):
    """Exact 1-D W1 between uniform empirical measures given sorted samples."""
    na, nb = len(a), len(b)
    if na == nb:
        return float(np.abs(a - b).mean())
    # integrate |Fa^-1 - Fb^-1| over the merged quantile grid
    edges = np.union1d(np.arange(1, na) / na, np.arange(1, nb) / nb)
    edges = np.concatenate([[0.0], edges, [1.0]])
    widths = np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    ia = np.minimum((mids * na).astype(int), na - 1)
    ib = np.minimum((mids * nb).astype(int), nb - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def sliced_wasserstein(a, b, n_proj=64, seed=0):
    """Mean exact 1-D W1 of the two point sets over random projections."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point batch")
    if n_proj < 1:
        raise ValueError("need n_proj >= 1")
    dim = a.shape[1]
    rng = np.random.default_rng(seed)
    if dim == 1:
        dirs = rng.choice([-1.0, 1.0], size=(n_proj, 1))
    else:
        dirs = rng.normal(size=(n_proj, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pbj = np.sort(b @ dirs.T, axis=0)
    if len(a) == len(b):
        return float(np.abs(pa - pbj).mean())
    return float(np.mean([_w1_sorted_uniform(pa[:, j], pbj[:, j])
                          for j in range(n_proj)]))


def w1_exact_1d(a_vals, a_weights, b_vals, b_weights):
    """Exact 1-D W1 between weighted discrete measures via the CDF formula."""
    a_vals = np.asarray(a_vals, dtype=np.float64).ravel()
    b_vals = np.asarray(b_vals, dtype=np.float64).ravel()
    a_w = np.asarray(a_weights, dtype=np.float64).ravel()
    b_w = np.asarray(b_weights, dtype=np.float64).ravel()
    for w in (a_w, b_w):
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to one")
    support = np.concatenate([a_vals, b_vals])
    order = np.argsort(support, kind="stable")
    support = support[order]
    delta = np.concatenate([a_w, -b_w])[order]
    cdf_gap = np.cumsum(delta)[:-1]  # F_a - F_b between consecutive points
    return float(np.sum(np.abs(cdf_gap) * np.diff(support)))


# -- renormalized residual distribution ---------------------------------------


def residual_to_distribution(net, problem, samples):
    """Weights proportional to r^2; errors out when the residual is flat zero."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("empty sample set")
    r2 = pb.residual_squared(problem, net, samples)
    total = r2.sum()
    if r2.max() < 1e-14:
        raise ValueError("degenerate residual: r^2 below 1e-14 everywhere")
    volume = 2.0**problem.dim
    return ResidualDistribution(samples, r2, float(r2.mean() * volume),
                                r2 / total)


def resample_distribution(dist, n, rng):
    """Draw n points from the weighted empirical measure."""
    idx = rng.choice(len(dist.points), size=n, p=dist.weights)
    return dist.points[idx]


def residual_uniform_distance(net, problem, samples, n_draws=10_000,
                              n_proj=64, seed=7):
    """Sliced W1 between the renormalized residual measure and uniform."""
    dist = residual_to_distribution(net, problem, samples)
    rng = np.random.default_rng(seed)
    drawn = resample_distribution(dist, n_draws, rng)
    uniform = rng.uniform(-1.0, 1.0, size=(n_draws, problem.dim))
    return sliced_wasserstein(drawn, uniform, n_proj=n_proj, seed=seed)


# -- optimal-density elliptic oracle ------------------------------------------


@dataclass
class OracleResult:
    density: np.ndarray
    lam: float
    pde_residual_max: float
    neumann_flux_max: float
    mass: float


def _neumann_blocks(n, h):
    """Ghost-eliminated 1-D Neumann Laplacian and trapezoid weights."""
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    lap = sps.diags([off, main, off], [-1, 0, 1], format="lil")
    lap[0, 1] = 2.0
    lap[n - 1, n - 2] = 2.0
    lap = (lap / h**2).tocsr()
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return lap, w


def optimal_density_oracle(r2_values, beta, lo=-1.0, hi=1.0):
    """Solve 2 beta lap(p) + r^2 - lam = 0 with zero Neumann flux, unit mass.

    r2_values is a 1-D (n,) or 2-D (nx, ny) grid of squared residuals on a
    uniform vertex-centered grid over [lo, hi]^d. The multiplier lam is the
    weighted grid mean of r^2, which makes the singular system compatible;
    the nullspace is fixed by the mass constraint through a KKT solve.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    r2 = np.asarray(r2_values, dtype=np.float64)
    if r2.ndim == 1:
        n = r2.shape[0]
        h = (hi - lo) / (n - 1)
        lap, w1 = _neumann_blocks(n, h)
        weights = w1
        quad = w1 * h
        lap_full = lap
    elif r2.ndim == 2:
        nx, ny = r2.shape
        if nx != ny:
            raise ValueError("2-D oracle expects a square grid")
        h = (hi - lo) / (nx - 1)
        lap1, w1 = _neumann_blocks(nx, h)
        eye = sps.identity(nx, format="csr")
        lap_full = sps.kron(lap1, eye) + sps.kron(eye, lap1)
        weights = np.kron(w1, w1)
        quad = weights * h**2
    else:
        raise ValueError("grid must be one- or two-dimensional")

    f = r2.ravel()
    lam = float(np.sum(weights * f) / weights.sum())
    wmat = sps.diags(weights)
    sym = (2.0 * beta) * (wmat @ lap_full)
    kkt = sps.bmat([[sym, quad[:, None]], [quad[None, :], None]], format="csc")
    rhs = np.concatenate([weights * (lam - f), [1.0]])
    sol = spsolve(kkt, rhs)
    p = sol[:-1]

    residual = 2.0 * beta * (lap_full @ p) + f - lam
    boundary = np.zeros(len(f), dtype=bool)
    if r2.ndim == 1:
        boundary[[0, -1]] = True
    else:
        mask = np.zeros(r2.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
        boundary = mask.ravel()
    # ghost-point flux implied by the boundary rows of the solved system
    flux = np.abs(residual[boundary]) * h / (4.0 * beta)
    return OracleResult(p.reshape(r2.shape), lam,
                        float(np.abs(residual).max()),
                        float(flux.max()), float(quad @ p))


def density_functional(r2_values, p, beta, lo=-1.0, hi=1.0):
    """Trapezoid value of int r^2 p - beta int |grad p|^2 on the grid."""
    r2 = np.asarray(r2_values, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if r2.ndim == 1:
        h = (hi - lo) / (len(r2) - 1)
        gp = np.gradient(p, h)
        return float(np.trapezoid(r2 * p, dx=h)
                     - beta * np.trapezoid(gp**2, dx=h))
    h = (hi - lo) / (r2.shape[0] - 1)
    gx, gy = np.gradient(p, h, h)
    term1 = np.trapezoid(np.trapezoid(r2 * p, dx=h, axis=1), dx=h)
    term2 = np.trapezoid(np.trapezoid(gx**2 + gy**2, dx=h, axis=1), dx=h)
    return float(term1 - beta * term2)


# -- density bounds ------------------------------------------------------------


def lipschitz_density_bound(lipschitz_constant, diameter, volume):
    """Upper bound K * diam + 1/volume for a K-Lipschitz density."""
    if lipschitz_constant < 0 or diameter <= 0 or volume <= 0:
        raise ValueError("bound needs K >= 0 and positive diameter/volume")
    return lipschitz_constant * diameter + 1.0 / volume


def density_bound_check(flow, n, rng):
    """Estimate the density's Lipschitz constant and verify the bound."""
    pts = rng.uniform(-1.0 + 1e-9, 1.0 - 1e-9, size=(n, flow.dim))
    ev = fl.log_density(flow, pts, with_grad=True)
    khat = float(np.linalg.norm(ev.grad_density, axis=1).max())
    diameter = 2.0 * np.sqrt(flow.dim)
    volume = 2.0**flow.dim
    bound = lipschitz_density_bound(khat, diameter, volume)
    max_density = float(ev.density.max())
    return {"k_hat": khat, "bound": bound, "max_density": max_density,
            "ok": max_density <= bound * (1.0 + 1e-6)}
