"""Synthetic multi-label datasets and their JSON-lines files.

Each label owns a Gaussian prototype in input space; an instance is the sum
of its active labels' prototypes plus isotropic noise, then rescaled into
[-1, 1] per coordinate. A small MLP learns this task well, which gives the
attacks a competent victim to work against.

File layout: a header line ``{"m": .., "d": .., "seed": ..}`` followed by one
``{"x": [...], "y": [label indices]}`` record per instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetParseError, ParameterError, ShapeError
from .evaluation import LabelSet


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    labels: tuple
    m: int
    d: int
    seed: int | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64).reshape(-1, self.d)
        if x.shape[0] != len(self.labels):
            raise ShapeError(f"{x.shape[0]} inputs but {len(self.labels)} label sets")
        for i, y in enumerate(self.labels):
            if y.m != self.m:
                raise ShapeError(f"instance {i}: label set over {y.m} labels, dataset has m={self.m}")
            if len(y) == 0:
                raise ParameterError(f"instance {i} has no true labels")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self):
        return self.x.shape[0]

    def __iter__(self):
        return iter(zip(self.x, self.labels))

    def label_matrix(self) -> np.ndarray:
        y = np.zeros((len(self), self.m))
        for i, ls in enumerate(self.labels):
            y[i, list(ls.indices)] = 1.0
        return y

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.x[idx], tuple(self.labels[i] for i in idx), self.m, self.d, self.seed)

    def split(self, n_first: int):
        """Split into the first ``n_first`` instances and the rest."""
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))


def normalize(x_raw, low=None, high=None) -> np.ndarray:
    """Affinely map each coordinate from ``[low, high]`` onto [-1, 1].

    ``low``/``high`` default to the per-coordinate min and max of ``x_raw``.
    Constant coordinates map to 0.
    """
    x = np.asarray(x_raw, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ParameterError("cannot normalize non-finite inputs")
    low = x.min(axis=0) if low is None else np.asarray(low, dtype=np.float64)
    high = x.max(axis=0) if high is None else np.asarray(high, dtype=np.float64)
    span = high - low
    flat = span <= 0
    safe = np.where(flat, 1.0, span)
    out = 2.0 * (x - low) / safe - 1.0
    return np.where(flat, 0.0, out)


def generate_synthetic(
    m: int,
    d: int,
    n: int,
    avg_labels: float,
    seed: int = 0,
    max_labels: int | None = None,
    noise: float = 0.5,
) -> Dataset:
    """Draw ``n`` instances over ``m`` labels in ``d`` input dimensions.

    Label counts are ``1 + Poisson(avg_labels - 1)`` capped at
    ``max_labels`` (default ``m - 1``), so every instance has at least one
    true label and at least one non-true label.
    """
    if m < 4:
        raise ParameterError(f"m must be >= 4, got {m}")
    if d < 2:
        raise ParameterError(f"d must be >= 2, got {d}")
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not 1 <= avg_labels < m:
        raise ParameterError(f"avg_labels must lie in [1, {m}), got {avg_labels}")
    max_labels = m - 1 if max_labels is None else int(max_labels)
    if not 1 <= max_labels < m:
        raise ParameterError(f"max_labels must lie in [1, {m - 1}], got {max_labels}")
    if noise < 0:
        raise ParameterError(f"noise must be >= 0, got {noise}")

    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(m, d))
    counts = np.minimum(1 + rng.poisson(avg_labels - 1.0, size=n), max_labels)
    labels = []
    x_raw = rng.normal(scale=noise, size=(n, d))
    for i, c in enumerate(counts):
        active = np.sort(rng.choice(m, size=int(c), replace=False))
        x_raw[i] += prototypes[active].sum(axis=0)
        labels.append(LabelSet(tuple(active.tolist()), m))
    return Dataset(normalize(x_raw), tuple(labels), m, d, seed)


def save_dataset(ds: Dataset, path) -> None:
    lines = [json.dumps({"m": ds.m, "d": ds.d, "seed": ds.seed})]
    for x, y in ds:
        lines.append(json.dumps({"x": x.tolist(), "y": list(y.indices)}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    """Read a JSON-lines dataset; malformed lines raise ``DatasetParseError``."""
    text = Path(path).read_text()
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise DatasetParseError("missing header line", 1)
    lineno, head = lines[0]
    try:
        header = json.loads(head)
        m, d = int(header["m"]), int(header["d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetParseError(f"bad header: {exc}", lineno) from exc
    if len(lines) == 1:
        raise ParameterError(f"{path}: dataset has a header but no instances")

    xs, labels = [], []
    for lineno, ln in lines[1:]:
        try:
            rec = json.loads(ln)
            x = [float(v) for v in rec["x"]]
            y = [int(v) for v in rec["y"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetParseError(f"bad record: {exc}", lineno) from exc
        if len(x) != d:
            raise DatasetParseError(f"expected {d} input values, got {len(x)}", lineno)
        if not y:
            raise DatasetParseError("instance has no true labels", lineno)
        if any(j < 0 or j >= m for j in y):
            raise DatasetParseError(f"label index out of range [0, {m}): {y}", lineno)
        if len(set(y)) != len(y):
            raise DatasetParseError(f"duplicate label index in {y}", lineno)
        xs.append(x)
        labels.append(LabelSet(tuple(y), m))
    return Dataset(np.array(xs), tuple(labels), m, d, header.get("seed"))
