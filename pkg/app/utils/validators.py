"""Validation utilities for probability tables and policy outputs"""
import numpy as np

from app.core.exceptions import ConfigurationError

ROW_SUM_TOLERANCE = 1e-12
DISTRIBUTION_TOLERANCE = 1e-9


def is_distribution(probs, tol: float = DISTRIBUTION_TOLERANCE) -> bool:
    """Validate a probability vector (or each row of a matrix)"""
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0 or not np.all(np.isfinite(probs)):
        return False

    if np.any(probs < 0):
        return False

    return bool(np.all(np.abs(probs.sum(axis=-1) - 1.0) <= tol))


def check_stochastic_rows(table, name: str, tol: float = ROW_SUM_TOLERANCE) -> None:
    """Raise ConfigurationError naming the first row that is not a distribution"""
    table = np.asarray(table, dtype=float)
    rows = table.reshape(-1, table.shape[-1])
    leading_shape = table.shape[:-1]

    for flat_index, row in enumerate(rows):
        row_label = np.unravel_index(flat_index, leading_shape) if leading_shape else ()
        row_label = ",".join(str(int(i)) for i in row_label)
        if not np.all(np.isfinite(row)) or np.any(row < 0):
            raise ConfigurationError(f"{name}[{row_label}] has negative or non-finite entries", field=name)
        if abs(row.sum() - 1.0) > tol:
            raise ConfigurationError(f"{name}[{row_label}] sums to {row.sum():.15f}, expected 1", field=name)


def validate_probability(value: float, name: str) -> float:
    if not 0.0 < value < 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {value}", field=name)
    return value
