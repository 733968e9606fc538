"""Learning diagonal noise models of SE(2) factor graphs by bilevel optimization."""

from .graph import Bounds, Factor, FactorGraph, NoiseParams, ParameterDomainError, StructuralError
from .learner import TrainConfig, TrainReport, train
from .lie import SE2Pose
from .solver import SolverOptions, SolveResult, solve, solve_many

__version__ = "0.1.0"

__all__ = [
    "Bounds", "Factor", "FactorGraph", "NoiseParams", "ParameterDomainError", "SE2Pose",
    "SolveResult", "SolverOptions", "StructuralError", "TrainConfig", "TrainReport", "solve",
    "solve_many", "train",
]
