"""Optimal designs for model averaging estimation of dose-response targets."""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ApproximateDesign,
    AveragingWeights,
    CandidateModel,
    DesignError,
    DesignSpace,
    ExactDesign,
    ModelKind,
    TargetED,
    TruthPrior,
    canonicalize,
    round_design,
)

__all__ = [
    "ApproximateDesign",
    "AveragingWeights",
    "CandidateModel",
    "DesignError",
    "DesignSpace",
    "ExactDesign",
    "ModelKind",
    "TargetED",
    "TruthPrior",
    "canonicalize",
    "round_design",
]
