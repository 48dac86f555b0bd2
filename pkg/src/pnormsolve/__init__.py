"""Iterative-refinement solvers for mixed quadratic + p-norm minimization."""

from .driver import SolveConfig, homotopy_init, solve_pnorm
from .errors import *  # noqa: F401,F403
from .graph import Graph, incidence_matrix
from .instances import (FlowInstance, PNormProblem, VoltageInstance, as_pnorm_problem,
                        flow_objective, objective_value, voltage_objective)
from .mwu import residual_solver

__version__ = "0.1.0"
