"""Dense linear-algebra and statistics kernels used by every other module.

All routines are pure functions over 2-D float64 arrays. Factorizations are
delegated to LAPACK via numpy; everything here validates inputs against the
package-wide conventions (finite entries, explicit shapes) and fixes the
statistical definitions the rest of the code relies on:

* quantiles interpolate linearly between order statistics,
* kurtosis is the raw (non-excess) fourth standardized moment with
  population moments, so it is >= 1 for any non-degenerate sample.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyInputError, InvalidInputError, InvalidRankError

#: Variance below this is treated as a degenerate (constant) sample.
DEGENERATE_VARIANCE = 1e-24

#: Default relative cutoff for small singular values in the pseudoinverse.
DEFAULT_PINV_TOL = 1e-10


class SvdFactors(NamedTuple):
    """Thin SVD of an m x n matrix: u (m x k), singular_values (k,), vh (k x n)."""

    u: np.ndarray
    singular_values: np.ndarray
    vh: np.ndarray


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def svd_full(m) -> SvdFactors:
    """Thin SVD with k = min(rows, cols) and non-increasing singular values."""
    a = as_matrix(m)
    if min(a.shape) < 1:
        raise InvalidInputError("svd_full needs at least one row and one column")
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    return SvdFactors(u, s, vh)


def rank_r_approx(m, r: int) -> np.ndarray:
    """Best Frobenius rank-r approximation (truncated SVD)."""
    a = as_matrix(m)
    k = min(a.shape)
    if not 1 <= r <= k:
        raise InvalidRankError(f"rank {r} outside [1, {k}] for shape {a.shape}")
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    return (u[:, :r] * s[:r]) @ vh[:r, :]


def pseudoinverse(m, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values <= tol * sigma_max are dropped."""
    a = as_matrix(m)
    if tol < 0:
        raise InvalidInputError(f"tol must be >= 0, got {tol}")
    return np.linalg.pinv(a, rcond=tol)


def quantile_threshold(values: Sequence[float], q: float) -> float:
    """Linearly interpolated empirical q-quantile; q=0 gives min, q=1 gives max."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise EmptyInputError("quantile of an empty sequence")
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("quantile input contains non-finite entries")
    if not 0.0 <= q <= 1.0:
        raise InvalidInputError(f"q must be in [0, 1], got {q}")
    return float(np.quantile(vals, q))


def kurtosis(values: Sequence[float]) -> float | None:
    """Raw Fisher-Pearson kurtosis m4/m2^2 with population moments.

    Returns None (degenerate) for fewer than 4 values or variance below
    DEGENERATE_VARIANCE. For any non-degenerate sample the result is >= 1.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("kurtosis input contains non-finite entries")
    if vals.size < 4:
        return None
    centered = vals - vals.mean()
    m2 = float(np.mean(centered * centered))
    if m2 < DEGENERATE_VARIANCE:
        return None
    m4 = float(np.mean(centered**4))
    return m4 / (m2 * m2)


def row_norms(m) -> np.ndarray:
    """Euclidean norm of each row."""
    return np.linalg.norm(as_matrix(m), axis=1)


def col_norms(m) -> np.ndarray:
    """Euclidean norm of each column."""
    return np.linalg.norm(as_matrix(m), axis=0)
