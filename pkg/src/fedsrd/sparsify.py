"""Client-side sparsification of low-rank adapter updates.

The importance score of an update entry is its magnitude times the
Euclidean norm of the factor vector it multiplies, which equals the
Frobenius norm of that entry's rank-1 contribution to the full-rank
update. Per-matrix sparsity ratios adapt to the kurtosis of the score
distribution: concentrated (heavy-tailed) scores tolerate aggressive
pruning, diffuse ones do not. Random drop-with-rescale and plain
magnitude pruning are provided as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import InvalidInputError, ShapeError
from .linalg import as_matrix, col_norms, kurtosis, quantile_threshold, row_norms
from .wire import SparseDelta


@dataclass(frozen=True)
class SparsityConfig:
    """Adaptive-ratio parameters: ratio = clamp(alpha + coeff * ln(kurtosis))."""

    alpha: float
    kurtosis_coeff: float = 0.1
    ratio_upper_bound: float = 0.99
    ratio_lower_bound: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.ratio_lower_bound <= self.ratio_upper_bound <= 1.0:
            raise InvalidInputError(
                "need 0 <= ratio_lower_bound <= ratio_upper_bound <= 1, got "
                f"[{self.ratio_lower_bound}, {self.ratio_upper_bound}]"
            )


def importance_b(delta_b, a_prev) -> np.ndarray:
    """Score entry (u, v) of the left-factor update as |delta_b[u,v]| * ||a_prev[v,:]||."""
    db = as_matrix(delta_b, "delta_b")
    ap = as_matrix(a_prev, "a_prev")
    if db.shape[1] != ap.shape[0]:
        raise ShapeError(f"delta_b cols {db.shape[1]} != a_prev rows {ap.shape[0]}")
    return np.abs(db) * row_norms(ap)[np.newaxis, :]


def importance_a(delta_a, b_new) -> np.ndarray:
    """Score entry (u, v) of the right-factor update as |delta_a[u,v]| * ||b_new[:,u]||."""
    da = as_matrix(delta_a, "delta_a")
    bn = as_matrix(b_new, "b_new")
    if bn.shape[1] != da.shape[0]:
        raise ShapeError(f"b_new cols {bn.shape[1]} != delta_a rows {da.shape[0]}")
    return np.abs(da) * col_norms(bn)[:, np.newaxis]


def ratio_from_kurtosis(k: float | None, config: SparsityConfig) -> float:
    """Map a kurtosis value to a sparsity ratio; degenerate (None) falls back to alpha."""
    if k is None:
        return config.alpha
    raw = config.alpha + config.kurtosis_coeff * math.log(k)
    return min(max(raw, config.ratio_lower_bound), config.ratio_upper_bound)


def adaptive_ratio(scores, config: SparsityConfig) -> float:
    """Sparsity ratio for one update matrix from its flattened score distribution."""
    return ratio_from_kurtosis(kurtosis(np.ravel(scores)), config)


def prune_by_importance(delta, scores, rho: float) -> SparseDelta:
    """Keep entries whose score strictly exceeds the rho-quantile of all scores.

    Kept values are the original entries, bit for bit; ties at the
    threshold are dropped.
    """
    d = as_matrix(delta, "delta")
    s = as_matrix(scores, "scores")
    if d.shape != s.shape:
        raise ShapeError(f"delta {d.shape} and scores {s.shape} must match")
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must be in [0, 1], got {rho}")
    threshold = quantile_threshold(s.ravel(), rho)
    return SparseDelta.from_dense(d, s > threshold)


def dare_sparsify(delta, drop_prob: float, seed: int) -> SparseDelta:
    """Drop entries independently with probability drop_prob, rescale survivors by 1/(1-p)."""
    d = as_matrix(delta, "delta")
    if not 0.0 <= drop_prob < 1.0:
        raise InvalidInputError(f"drop_prob must be in [0, 1), got {drop_prob}")
    rng = np.random.default_rng(seed)
    mask = rng.random(d.shape) >= drop_prob
    return SparseDelta(d.shape[0], d.shape[1], mask, d[mask] / (1.0 - drop_prob))


def magnitude_sparsify(delta, rho: float) -> SparseDelta:
    """Keep entries whose magnitude strictly exceeds the rho-quantile of |entries|."""
    d = as_matrix(delta, "delta")
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must be in [0, 1], got {rho}")
    magnitudes = np.abs(d)
    threshold = quantile_threshold(magnitudes.ravel(), rho)
    return SparseDelta.from_dense(d, magnitudes > threshold)
