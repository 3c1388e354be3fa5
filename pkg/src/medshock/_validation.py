"""Input validation helpers shared across modules."""

from __future__ import annotations

import numpy as np
import pandas as pd


class DataError(ValueError):
    """An input file or frame violates the data contracts."""


class NumericError(RuntimeError):
    """A numerical procedure cannot complete on this input."""


class RankError(NumericError):
    """The design matrix is rank deficient."""

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = columns or []


class ConvergenceError(NumericError):
    """An iterative solver failed to converge."""


class PerfectSeparationError(NumericError):
    """The logistic likelihood is unbounded (classes perfectly separated)."""


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 ndarray and require finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def require_columns(frame: pd.DataFrame, columns, where: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{where}: missing column(s) {', '.join(missing)}")


def check_positive(value, name: str) -> None:
    if not value > 0:
        raise DataError(f"{name} must be positive, got {value}")
