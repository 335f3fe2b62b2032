"""Incentive mechanisms for truthful peer grading: losses, bounds and simulation."""

from .assignment import (
    BipartiteAssignment,
    ReviewTree,
    build_assignment,
    build_review_tree,
    coverage_probability,
    min_instructor_workload,
)
from .bounds import gamma_range, min_p_for_truthfulness, review_cost
from .losses import LossSpec
from .model import GradeGraph, QualityDistribution, Strategy, StrategyProfile

__version__ = "0.1.0"

__all__ = [
    "BipartiteAssignment",
    "GradeGraph",
    "LossSpec",
    "QualityDistribution",
    "ReviewTree",
    "Strategy",
    "StrategyProfile",
    "build_assignment",
    "build_review_tree",
    "coverage_probability",
    "gamma_range",
    "min_instructor_workload",
    "min_p_for_truthfulness",
    "review_cost",
]
