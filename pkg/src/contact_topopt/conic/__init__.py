"""Conic programs over orthant and rotated second-order cone blocks."""

from .cones import (ConeBlock, FreeBlock, cone_membership, cone_violation,
                    dual_cone_membership, rotated_to_soc)
from .ipm import certify, solve_conic
from .program import ConicProgram, ConicSolution, SolverConfig, Status

__all__ = [
    "ConeBlock", "FreeBlock", "ConicProgram", "ConicSolution", "SolverConfig", "Status",
    "cone_membership", "dual_cone_membership", "cone_violation", "rotated_to_soc",
    "solve_conic", "certify",
]
