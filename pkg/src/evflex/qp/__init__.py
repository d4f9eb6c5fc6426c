"""Sparse QP representation, splitting solver and branch-and-bound."""

from .bnb import BranchAndBound, solve_miqp_bb
from .problem import QpBuilder, QpProblem, read_triplets
from .splitting import QpSolution, SolverSettings, SplittingSolver, solve_qp

__all__ = [
    "BranchAndBound",
    "QpBuilder",
    "QpProblem",
    "QpSolution",
    "SolverSettings",
    "SplittingSolver",
    "read_triplets",
    "solve_miqp_bb",
    "solve_qp",
]
