"""Robust Stackelberg control of the 1D semilinear heat equation.

A follower control plays a saddle point against a worst-case disturbance for
any fixed leader control; the leader then seeks a minimal-norm control that
drives the resulting coupled optimality system close to zero at the final time.
"""

from .coupled import RobustParams, solve_adjoint_pair, solve_monolithic, solve_optimality_system
from .errors import ConvergenceError, DomainError, GeometryError, GridMismatchError, SpecError
from .follower import AdmissibleBox, SaddleSolution, solve_saddle_ascent_descent, solve_saddle_direct, solve_saddle_projected
from .leader import LeaderSolution, minimize_F_eps, verify_null_control
from .mesh import Grid, RegionMask, Regions, SpaceTimeField, make_grid, make_regions
from .pde import Nonlinearity, Potential

__version__ = "0.1.0"

__all__ = [
    "AdmissibleBox",
    "ConvergenceError",
    "DomainError",
    "GeometryError",
    "Grid",
    "GridMismatchError",
    "LeaderSolution",
    "Nonlinearity",
    "Potential",
    "RegionMask",
    "Regions",
    "RobustParams",
    "SaddleSolution",
    "SpaceTimeField",
    "SpecError",
    "make_grid",
    "make_regions",
    "minimize_F_eps",
    "solve_adjoint_pair",
    "solve_monolithic",
    "solve_optimality_system",
    "solve_saddle_ascent_descent",
    "solve_saddle_direct",
    "solve_saddle_projected",
    "verify_null_control",
]
