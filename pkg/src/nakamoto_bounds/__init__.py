"""Latency-security bounds for Nakamoto consensus and a private-mining simulator."""

from .bounds import (
    BoundsReport,
    NotReachable,
    SweepTable,
    bounds_report,
    entropy_identity_residual,
    min_depth_for_risk,
    sweep,
    thm1_lower,
    thm1_upper,
    thm2_lower,
    thm2_upper,
)
from .core_model import ProtocolParams, confirmation_depth, validate_params
from .errors import DomainError, FaultToleranceExceeded, InvariantViolation, TrialBudgetError

__all__ = [
    "BoundsReport",
    "DomainError",
    "FaultToleranceExceeded",
    "InvariantViolation",
    "NotReachable",
    "ProtocolParams",
    "SweepTable",
    "TrialBudgetError",
    "bounds_report",
    "confirmation_depth",
    "entropy_identity_residual",
    "min_depth_for_risk",
    "sweep",
    "thm1_lower",
    "thm1_upper",
    "thm2_lower",
    "thm2_upper",
    "validate_params",
]
__version__ = "0.1.0"
