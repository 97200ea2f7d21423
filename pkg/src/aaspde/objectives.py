"""Loss estimators for residual training and adversarial sampling.

Three estimators cover the alternating scheme: the plain empirical residual
loss on a fixed set, the minimization-step loss on flow-drawn batches (which
carries no importance weights; the sampling distribution is the weight), and
the maximization objective, an importance-sampled residual average against a
frozen reference density minus a gradient-squared smoothness penalty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import problems as pb
from .autodiff import Var, value_of

DENSITY_FLOOR = 1e-12  # reference densities are clamped here in ratios

__all__ = ["LossBreakdown", "empirical_pinn_loss", "aas_min_loss",
           "aas_max_objective"]


@dataclass
class LossBreakdown:
    """Scalar summary of one loss evaluation (floats, detached)."""

    interior: float
    boundary: float
    h1: float
    total: float
    gamma: float
    beta: float


def _scalar(x):
    return float(value_of(x))


def _mean_sq(problem, net, x, params):
    r2 = pb.residual_squared(problem, net, x, params=params)
    return ad.vmean(r2) if isinstance(r2, Var) else r2.mean()


def _boundary_mean_sq(problem, net, x_b, params):
    b = pb.boundary_residual(problem, net, x_b, params=params)
    if isinstance(b, Var):
        return ad.vmean(ad.vsum(b * b, axis=1))
    return (b * b).sum(axis=1).mean()


def _residual_loss(net, problem, interior, boundary, gamma, params):
    if len(np.atleast_2d(interior)) == 0:
        raise ValueError("empty interior sample set")
    inner = _mean_sq(problem, net, interior, params)
    if boundary is not None:
        if len(np.atleast_2d(boundary)) == 0:
            raise ValueError("empty boundary sample set")
        bnd = _boundary_mean_sq(problem, net, boundary, params)
    else:
        bnd = 0.0
    total = inner + gamma * bnd
    breakdown = LossBreakdown(_scalar(inner), _scalar(bnd), 0.0,
                              _scalar(total), gamma, 0.0)
    return breakdown, total


def empirical_pinn_loss(net, problem, interior, boundary, gamma, params=None):
    """Mean squared residual plus gamma times mean squared boundary defect.

    Returns (breakdown, node); the node carries the tape when ``params``
    are Vars and is a plain float otherwise.
    """
    return _residual_loss(net, problem, interior, boundary, gamma, params)


def aas_min_loss(net, problem, flow_batch, boundary_batch, gamma, params=None):
    """Minimization-step loss on a batch drawn from the sampler density.

    Identical form to the empirical loss; the batch provenance is the
    weighting, so no importance factors appear.
    """
    return _residual_loss(net, problem, flow_batch, boundary_batch, gamma, params)


def aas_max_objective(flow, flow_ref, net, problem, batch, beta, params=None):
    """Importance-sampled objective ascended by the sampler.

    mean(r^2 p/p_ref) - beta * mean(|grad p|^2 / p_ref) over a batch drawn
    from the frozen reference density p_ref. The residual factor and p_ref
    are constants here: only the live density parameters receive gradients.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or len(batch) == 0:
        raise ValueError("empty interior sample set")
    r2 = value_of(pb.residual_squared(problem, net, batch))
    p_ref = fl.log_density(flow_ref, batch).density
    alive = np.isfinite(p_ref) & (p_ref > 0.0)
    if not np.all(alive):
        warnings.warn(
            f"reference density underflow at {int((~alive).sum())} of "
            f"{len(batch)} batch points; rejecting them", RuntimeWarning)
        if not np.any(alive):
            raise ValueError("reference density underflowed on every batch point")
        batch, r2, p_ref = batch[alive], r2[alive], p_ref[alive]
    p_ref = np.maximum(p_ref, DENSITY_FLOOR)

    ev = fl.log_density(flow, batch, params=params, with_grad=True)
    ratio_w = r2 / p_ref
    grad_sq = (ad.vsum(ev.grad_density * ev.grad_density, axis=1)
               if isinstance(ev.grad_density, Var)
               else (ev.grad_density ** 2).sum(axis=1))
    if isinstance(ev.density, Var) or isinstance(grad_sq, Var):
        importance = ad.vmean(ev.density * ratio_w)
        h1 = ad.vmean(grad_sq * (1.0 / p_ref))
    else:
        importance = (ev.density * ratio_w).mean()
        h1 = (grad_sq / p_ref).mean()
    total = importance - beta * h1
    breakdown = LossBreakdown(_scalar(importance), 0.0, _scalar(h1),
                              _scalar(total), 0.0, beta)
    return breakdown, total
