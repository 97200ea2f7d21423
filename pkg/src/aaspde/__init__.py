"""Adversarial adaptive sampling for neural-network PDE approximation.

A solution network is trained on the squared PDE residual while a bounded
normalizing flow adversarially reshapes the collocation set, concentrating
samples where the residual is large and thereby reducing the statistical
error of the Monte Carlo loss.
"""

from .autodiff import Jet, Var, backward, parameter_gradient
from .network import AnalyticFunction, DiffResult, SolutionNet, evaluate, input_derivatives

__version__ = "0.1.0"
