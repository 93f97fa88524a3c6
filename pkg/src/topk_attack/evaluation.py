"""Label sets, the top-k consistency score and attack metrics.

An instance is classified correctly at cutoff k when its true label set and
the predicted top-k set are nested (either one contains the other). An
attack succeeds when it breaks that relation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError
from .topk_math import as_scores, rank_desc

STRATEGIES = ("best", "random", "worst")


@dataclass(frozen=True)
class LabelSet:
    """A subset of ``{0, ..., m-1}`` with a multi-hot vector view."""

    indices: tuple
    m: int

    def __post_init__(self):
        idx = tuple(sorted({int(i) for i in self.indices}))
        if len(idx) != len(tuple(self.indices)):
            raise ParameterError(f"duplicate label indices in {self.indices}")
        if idx and (idx[0] < 0 or idx[-1] >= self.m):
            raise ParameterError(f"label indices must lie in [0, {self.m}), got {self.indices}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_vector(cls, y) -> "LabelSet":
        y = np.asarray(y)
        if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
            raise ParameterError("label vector must be a 1-D 0/1 array")
        return cls(tuple(np.flatnonzero(y).tolist()), y.size)

    def vector(self) -> np.ndarray:
        y = np.zeros(self.m, dtype=np.int64)
        y[list(self.indices)] = 1
        return y

    def as_set(self) -> frozenset:
        return frozenset(self.indices)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, j):
        return j in self.indices


@dataclass(frozen=True)
class TargetSet:
    """``k`` labels to plant in the top-k, disjoint from the true labels."""

    labels: LabelSet

    @classmethod
    def build(cls, labels: Iterable[int], truth: LabelSet, k: int | None = None) -> "TargetSet":
        ls = LabelSet(tuple(labels), truth.m)
        if k is not None and len(ls) != k:
            raise ParameterError(f"target set must have exactly k={k} labels, got {len(ls)}")
        if not 1 <= len(ls) < truth.m:
            raise ParameterError(f"target set size must lie in [1, {truth.m}), got {len(ls)}")
        if ls.as_set() & truth.as_set():
            raise ParameterError(f"target labels {ls.indices} overlap the true labels {truth.indices}")
        return cls(ls)

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def m(self) -> int:
        return self.labels.m

    def signs(self) -> np.ndarray:
        """+1 for target labels, -1 for every other label."""
        return 2.0 * self.labels.vector() - 1.0


def top_k_set(scores, k: int) -> LabelSet:
    """Labels of the ``k`` highest scores (ties go to the smaller index)."""
    f = as_scores(scores)
    if isinstance(k, bool) or int(k) != k or not 1 <= k < f.size:
        raise ParameterError(f"k must be an integer in [1, {f.size - 1}], got {k}")
    return LabelSet(tuple(rank_desc(f).sorted_indices[: int(k)].tolist()), f.size)


def consistency(truth: LabelSet, predicted: LabelSet) -> int:
    """1 when one label set contains the other (or they are equal), else 0."""
    y, p = truth.as_set(), predicted.as_set()
    return int((y < p) + (p < y) + (y == p))


def label_consistency(scores, truth: LabelSet, k: int) -> int:
    return consistency(truth, top_k_set(scores, k))


def truth_cleared(scores, truth: LabelSet, k: int) -> bool:
    """True when no true label is among the top-k.

    This implies ``label_consistency(...) == 0`` at ``k`` and at every
    smaller cutoff, which a partial overlap such as Y={1,2}, top-k={1,3}
    does not.
    """
    return not (top_k_set(scores, k).as_set() & truth.as_set())


def consistency_rate(model, dataset, k: int) -> float:
    """Fraction of instances the model classifies correctly at cutoff ``k``."""
    scores = model.predict(dataset.x)
    return float(np.mean([label_consistency(f, y, k) for f, y in zip(scores, dataset.labels)]))


@dataclass(frozen=True)
class EvalRecord:
    instance_id: int
    truth: LabelSet
    success: bool
    norm: float
    d: int

    def __post_init__(self):
        if not self.norm >= 0:
            raise ParameterError(f"perturbation norm must be >= 0, got {self.norm}")
        if self.d < 1:
            raise ParameterError(f"input dimension must be >= 1, got {self.d}")


def asr(records: Sequence[EvalRecord]) -> float:
    """Fraction of records whose attack succeeded."""
    if not records:
        raise ParameterError("attack success rate of an empty record list is undefined")
    return sum(1 for r in records if r.success) / len(records)


def pert(records: Sequence[EvalRecord]) -> float:
    """Average per-dimension l2 perturbation over successful attacks.

    Computed as ``sum_i ||z_i|| * success_i / d_i`` divided by ``n * ASR``.
    Returns NaN when nothing succeeded.
    """
    rate = asr(records)
    if rate == 0.0:
        return math.nan
    total = sum(r.norm / r.d for r in records if r.success)
    return total / (len(records) * rate)


def pert_over_successes(records: Sequence[EvalRecord]) -> float:
    """Plain mean of ``||z|| / d`` over the successful records."""
    vals = [r.norm / r.d for r in records if r.success]
    return float(np.mean(vals)) if vals else math.nan


def clip_to_box(x, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    return np.clip(x, low, high)


def uasr(model, dataset, z, k: int, low: float = -1.0, high: float = 1.0) -> float:
    """Fraction of instances fooled by the one shared perturbation ``z``."""
    x = np.asarray(dataset.x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ParameterError("universal success rate of an empty dataset is undefined")
    scores = model.predict(clip_to_box(x + np.asarray(z, dtype=np.float64), low, high))
    fooled = [label_consistency(f, y, k) == 0 for f, y in zip(scores, dataset.labels)]
    return float(np.mean(fooled))


def select_targets(scores, truth: LabelSet, k: int, strategy: str, seed=None) -> TargetSet:
    """Pick ``k`` non-true labels to plant.

    ``best`` takes the highest-scoring non-true labels, ``worst`` the lowest,
    and ``random`` samples uniformly without replacement using ``seed``.
    """
    f = as_scores(scores)
    if truth.m != f.size:
        raise ParameterError(f"truth is over {truth.m} labels but there are {f.size} scores")
    ranked = [j for j in rank_desc(f).sorted_indices.tolist() if j not in truth]
    if len(ranked) < k:
        raise ParameterError(f"only {len(ranked)} non-true labels available, need k={k}")
    strategy = strategy.lower()
    if strategy == "best":
        chosen = ranked[:k]
    elif strategy == "worst":
        chosen = ranked[len(ranked) - k :]
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        chosen = rng.choice(sorted(ranked), size=k, replace=False).tolist()
    else:
        raise ParameterError(f"unknown target strategy {strategy!r}; expected one of {STRATEGIES}")
    return TargetSet.build(chosen, truth, k)
