"""Top-k sums, the average-of-top-k function and its variational form.

Scores are plain 1-D numpy arrays. All functions here are pure.

The average of the k largest scores satisfies

    avg_top_k(f, k) = min_{lam in [0, 1]} (1/k) * (k*lam + sum_j [f_j - lam]_+)

and the k-th largest score is always a minimiser, which is what lets the
attack losses drop the explicit sort.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, ParameterError


class RankedScores(NamedTuple):
    """Scores sorted in descending order with the permutation that sorts them."""

    sorted_values: np.ndarray
    sorted_indices: np.ndarray


def as_scores(scores, *, calibrated: bool = False) -> np.ndarray:
    """Return ``scores`` as a finite 1-D float64 array of length >= 2.

    With ``calibrated=True`` every entry must also lie in [0, 1].
    """
    f = np.asarray(scores, dtype=np.float64)
    if f.ndim != 1 or f.size < 2:
        raise InvalidInputError(f"scores must be a 1-D vector of length >= 2, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("scores contain non-finite entries")
    if calibrated and (f.min() < 0.0 or f.max() > 1.0):
        raise InvalidInputError("calibrated scores must lie in [0, 1]")
    return f


def _check_k(k: int, m: int) -> int:
    if isinstance(k, bool) or int(k) != k or not 1 <= k <= m:
        raise ParameterError(f"k must be an integer in [1, {m}], got {k}")
    return int(k)


def hinge(a):
    """Positive part ``max(0, a)``; works on scalars and arrays."""
    if np.ndim(a) == 0:
        return max(0.0, float(a))
    return np.maximum(a, 0.0)


def rank_desc(scores) -> RankedScores:
    """Sort scores descending; equal scores keep ascending label order."""
    f = as_scores(scores)
    # stable sort of the negated scores keeps the smaller index first on ties
    order = np.argsort(-f, kind="stable")
    return RankedScores(f[order], order)


def kth_largest(scores, k: int) -> float:
    f = as_scores(scores)
    k = _check_k(k, f.size)
    return float(rank_desc(f).sorted_values[k - 1])


def top_k_sum(scores, k: int) -> float:
    """Sum of the ``k`` largest entries."""
    f = as_scores(scores)
    k = _check_k(k, f.size)
    return float(np.sum(rank_desc(f).sorted_values[:k]))


def avg_top_k(scores, k: int) -> float:
    """Mean of the ``k`` largest entries, an upper bound on the k-th largest."""
    return top_k_sum(scores, k) / k


def avg_top_k_variational(scores, k: int, lam: float) -> float:
    """Evaluate ``(k*lam + sum_j [f_j - lam]_+) / k`` at a fixed threshold ``lam``.

    For calibrated scores this is >= ``avg_top_k(scores, k)`` for every
    ``lam`` in [0, 1], with equality at ``lam = optimal_lambda(scores, k)``.
    """
    f = as_scores(scores)
    k = _check_k(k, f.size)
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return (k * lam + float(np.sum(hinge(f - lam)))) / k


def optimal_lambda(scores, k: int) -> float:
    """Return the k-th largest score, a minimiser of the variational form."""
    return kth_largest(scores, k)
