"""Small input-checking helpers shared by the estimators and functionals."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import NegativeDensityError, ParameterError


def check_scalar(value, name, *, low=None, high=None, include_low=True,
                 include_high=True):
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ParameterError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ParameterError(f"{name} must be finite, got {value}")
    if low is not None:
        if value < low or (value == low and not include_low):
            op = ">=" if include_low else ">"
            raise ParameterError(f"{name} must be {op} {low}, got {value}")
    if high is not None:
        if value > high or (value == high and not include_high):
            op = "<=" if include_high else "<"
            raise ParameterError(f"{name} must be {op} {high}, got {value}")
    return value


def check_wealths(w, name="wealths"):
    """Return ``w`` as a 1-d float array of nonnegative finite values."""
    w = check_array(np.asarray(w, dtype=float).reshape(1, -1),
                    ensure_all_finite=True).ravel().copy()
    if np.any(w < 0):
        raise ParameterError(f"{name} must be nonnegative")
    return w


def check_density_values(values, widths, *, mass=None, mass_tol=1e-6,
                         allow_2d=False):
    """Validate cell-average density values against a grid's widths."""
    values = np.asarray(values, dtype=float)
    if allow_2d and values.ndim == 2:
        arr = check_array(values, ensure_all_finite=True)
    else:
        arr = check_array(values.reshape(1, -1), ensure_all_finite=True)
    if arr.shape[1] != len(widths):
        raise ParameterError(
            f"density has {arr.shape[1]} cells but the grid has {len(widths)}")
    neg = np.argwhere(arr < 0)
    if len(neg):
        raise NegativeDensityError(
            f"negative density value {arr[tuple(neg[0])]:.3e} in cell {neg[0][-1]}",
            cell=int(neg[0][-1]))
    if mass is not None:
        masses = arr @ widths
        bad = np.abs(masses - mass) > mass_tol
        if np.any(bad):
            raise ParameterError(
                f"density mass {masses[bad][0]!r} deviates from {mass} "
                f"by more than {mass_tol}")
    if allow_2d and values.ndim == 2:
        return arr
    return arr.ravel()
