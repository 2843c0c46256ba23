"""Two-stage parameter estimation for ordinary differential equations.

Stage 1 smooths the data and minimises an integral-matching criterion,
solving in closed form for parameters that enter the equations linearly.
Stage 2 refines those estimates by trajectory least squares or a
user-supplied negative log-likelihood.
"""

from .errors import (DomainError, ExprSyntaxError, IdentifiabilityError, ModelError, OdesepError,
                     OptimizationError, RoleError, SolverError, UnboundSymbolError, UnknownFunctionError)
from .expr import eval_expr, parse_expression, pretty
from .fitpipe import (FitConfig, FitFailure, FitResult, McSummary, ObservationSet, fit, fit_sets,
                      mc_summary, nls_loss)
from .imcore import ImProblem, direct_linear_estimate, fit_im, fit_im_decoupled, im_loss, reduced_criterion
from .model import OdeModel, decompose_linear, validate_roles
from .nlopt import OptimConfig, OptimResult, minimize
from .odesolve import ExternalInput, Integrator, Trajectory, solve_ode
from .profileci import ConfInt, ProfileCurve, ProfileResult, confint, profile
from .smoothing import SmoothedPath, smooth_all, smooth_spline_gcv

__version__ = "0.1.0"

__all__ = [
    "ConfInt", "DomainError", "ExprSyntaxError", "ExternalInput", "FitConfig", "FitFailure", "FitResult",
    "IdentifiabilityError", "ImProblem", "Integrator", "McSummary", "ModelError", "ObservationSet",
    "OdeModel", "OdesepError", "OptimConfig", "OptimResult", "OptimizationError", "ProfileCurve",
    "ProfileResult", "RoleError", "SmoothedPath", "SolverError", "Trajectory", "UnboundSymbolError",
    "UnknownFunctionError", "confint", "decompose_linear", "direct_linear_estimate", "eval_expr", "fit",
    "fit_im", "fit_im_decoupled", "fit_sets", "im_loss", "mc_summary", "minimize", "nls_loss",
    "parse_expression", "pretty", "profile", "reduced_criterion", "smooth_all", "smooth_spline_gcv",
    "solve_ode", "validate_roles",
]
