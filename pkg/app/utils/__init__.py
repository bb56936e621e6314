"""Utility functions and helpers"""
from .validators import (
    check_stochastic_rows,
    is_distribution,
    validate_probability
)
from .artifacts import (
    RunPaths,
    require_artifact
)

__all__ = [
    "check_stochastic_rows",
    "is_distribution",
    "validate_probability",
    "RunPaths",
    "require_artifact"
]
