"""Transposition solvers for backward stochastic evolution equations and a
maximum-principle laboratory on finite-dimensional truncations."""

from .kernels import BACKEND
from .model_space import LiftedSemigroup, ModelSpace, Semigroup, build_generator, semigroup_apply
from .stochastic import AdaptedProcess, BrownianBundle, TimeGrid, sample_brownian
from .vector_bsee import BseeData, BseeSolution, solve_backward_regression, transposition_solve
from .operator_bsee import OperatorBseeData, OperatorBseeSolution, solve_operator_bsee
from .maximum_principle import ControlProblem, ControlSet, SpikeSpec

__version__ = "0.1.0"

__all__ = ["BACKEND", "LiftedSemigroup", "ModelSpace", "Semigroup", "build_generator", "semigroup_apply",
           "AdaptedProcess", "BrownianBundle", "TimeGrid", "sample_brownian", "BseeData", "BseeSolution",
           "solve_backward_regression", "transposition_solve", "OperatorBseeData", "OperatorBseeSolution",
           "solve_operator_bsee", "ControlProblem", "ControlSet", "SpikeSpec"]
