"""EPIRK-W exponential integration with exact discrete adjoints for 4D-Var.

Modules
-------
matfun
    Dense oracles and Krylov products for ``phi_k`` and ``psi`` functions.
tableau
    Method coefficients loaded from JSON.
integrator
    Fixed-step EPIRK-W integration with a step tape.
adjoint
    Backward sweep of the discrete adjoint.
assimilation
    4D-Var cost and gradient, covariances, twin-experiment synthesis.
optimize
    L-BFGS with strong-Wolfe line search and box bounds.
models
    Lorenz-96, a nonlinear diffusion surrogate and small test models.
reference
    DOP853 reference solutions for convergence studies.
cli
    ``epirkw`` command-line driver.
"""

from .adjoint import AdjointResult, AdjointSeed, adjoint_step, adjoint_sweep, parameter_gradient
from .assimilation import (CovarianceModel, DiffusionProtocol, Experiment, FourDVarProblem,
                           LinearProtocol, LorenzProtocol, Observation, augment_model,
                           fd_gradient, gradient_rel_errors, synthesize_experiment)
from .integrator import OdeModel, StepTape, epirkw_step, integrate
from .matfun import KrylovConfig, KrylovError, phi_dense, phi_times_vector, psi_dense, psi_products
from .models import Diffusion1D, LinearModel, Lorenz96, MaterialLaw, ZeroModel
from .optimize import OptimizerConfig, OptimizerTrace, minimize
from .tableau import Tableau, TableauError, load_tableau

__version__ = "0.1.0"

__all__ = [
    "AdjointResult", "AdjointSeed", "adjoint_step", "adjoint_sweep", "parameter_gradient",
    "CovarianceModel", "DiffusionProtocol", "Experiment", "FourDVarProblem", "LinearProtocol",
    "LorenzProtocol", "Observation", "augment_model", "fd_gradient", "gradient_rel_errors",
    "synthesize_experiment", "OdeModel", "StepTape", "epirkw_step", "integrate",
    "KrylovConfig", "KrylovError", "phi_dense", "phi_times_vector", "psi_dense", "psi_products",
    "Diffusion1D", "LinearModel", "Lorenz96", "MaterialLaw", "ZeroModel",
    "OptimizerConfig", "OptimizerTrace", "minimize", "Tableau", "TableauError", "load_tableau",
]
