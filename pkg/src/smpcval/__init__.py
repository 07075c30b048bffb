"""Stochastic MPC with sampled constraint tightening and penalty-factor validation."""
from .closedloop import (ClosedLoopTrace, SweepError, SweepResult, performance_index, rho_grid,
                         select_rho, simulate, sweep, terminal_hull, violation_measure)
from .probval import (ProbabilisticLevels, binomial_tail, generalized_max, sample_complexity)
from .qpcore import QpProblem, QpSettings, solve_qp
from .smpc import PenaltyController, kappa
from .sysmodel import ControllerDesign, LtiSystem, solve_dlqr
from .tightening import TighteningProfile, compute_tightening, validate_tightening
from .uncertainty import DisturbanceModel

__version__ = "0.1.0"

__all__ = [
    "ClosedLoopTrace", "SweepError", "SweepResult", "performance_index", "rho_grid", "select_rho",
    "simulate", "sweep", "terminal_hull", "violation_measure", "ProbabilisticLevels",
    "binomial_tail", "generalized_max", "sample_complexity", "QpProblem", "QpSettings",
    "solve_qp", "PenaltyController", "kappa", "ControllerDesign", "LtiSystem", "solve_dlqr",
    "TighteningProfile", "compute_tightening", "validate_tightening", "DisturbanceModel",
]
