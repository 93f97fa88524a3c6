"""Differentiable multi-label victims with sigmoid-calibrated outputs.

A victim is a small fully connected network ``d -> h_1 -> ... -> m`` whose
last layer is passed through an elementwise sigmoid, so every score lies in
(0, 1) and ranking is unchanged by the calibration. With no hidden layers the
model is a linear scorer ``f_j(x) = sigmoid(w_j . x + b_j)``.

The attacks need ``df_j/dx`` for every label, so models expose the dense
``m x d`` input Jacobian computed by backpropagating through the layers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "topk-attack/mlp-v1"


def sigmoid(raw):
    """Numerically stable logistic function, elementwise."""
    a = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def sigmoid_calibrate(raw: float) -> float:
    """Map a raw real score into (0, 1) without changing its rank."""
    return float(sigmoid(float(raw)))


def _tanh_grad(a, h):
    return 1.0 - h * h


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, h):
    return (a > 0).astype(np.float64)


def _identity(a):
    return a


def _identity_grad(a, h):
    return np.ones_like(a)


# activation id -> (forward, derivative given pre-activation and output)
ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
}


@runtime_checkable
class Predictor(Protocol):
    """What the attacks need from a victim model."""

    def predict(self, x) -> np.ndarray: ...

    def input_jacobian(self, x) -> np.ndarray: ...

    def num_labels(self) -> int: ...

    def input_dim(self) -> int: ...


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Fully connected network with sigmoid outputs.

    ``weights[l]`` has shape ``(out_l, in_l)`` and ``biases[l]`` shape
    ``(out_l,)``. The hidden activation is applied after every layer except
    the last, which is followed by the sigmoid.
    """

    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias vector per weight matrix and at least one layer")
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} are inconsistent")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} gives {ws[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ParameterError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def num_labels(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.input_dim(),) or x.ndim > 2:
            raise ShapeError(f"expected input of length {self.input_dim()}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ShapeError("input contains non-finite values")
        return x

    def _forward(self, x):
        """Return pre-activations and activations of every layer."""
        act, _ = ACTIVATIONS[self.activation]
        pre, post = [], [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            h = sigmoid(a) if i == last else act(a)
            pre.append(a)
            post.append(h)
        return pre, post

    def logits(self, x) -> np.ndarray:
        return self._forward(self._check_input(x))[0][-1]

    def predict(self, x) -> np.ndarray:
        """Calibrated scores for one input (shape ``(m,)``) or a batch ``(n, m)``."""
        return np.asarray(self._forward(self._check_input(x))[1][-1])

    def input_jacobian(self, x) -> np.ndarray:
        """``J[j, i] = d f_j / d x_i`` at a single input ``x``."""
        return self.predict_with_jacobian(x)[1]

    def predict_with_jacobian(self, x):
        """Scores and input Jacobian from a single forward pass."""
        x = self._check_input(x)
        if x.ndim != 1:
            raise ShapeError("input_jacobian takes a single input vector")
        _, dact = ACTIVATIONS[self.activation]
        pre, post = self._forward(x)
        f = post[-1]
        # d f / d logits is diagonal for the elementwise sigmoid
        jac = (f * (1.0 - f))[:, None] * self.weights[-1]
        for i in range(len(self.weights) - 2, -1, -1):
            jac = (jac * dact(pre[i], post[i + 1])[None, :]) @ self.weights[i]
        return f, jac

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "input_dim": self.input_dim(),
            "num_labels": self.num_labels(),
            "activation": self.activation,
            "layers": [
                {
                    "rows": int(w.shape[0]),
                    "cols": int(w.shape[1]),
                    "weight": w.ravel().tolist(),
                    "bias": b.tolist(),
                }
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ParameterError(f"unsupported model format {doc.get('format')!r}")
        ws, bs = [], []
        for i, layer in enumerate(doc["layers"]):
            w = np.asarray(layer["weight"], dtype=np.float64)
            if w.size != layer["rows"] * layer["cols"]:
                raise ShapeError(f"layer {i}: {w.size} weights for a {layer['rows']}x{layer['cols']} matrix")
            ws.append(w.reshape(layer["rows"], layer["cols"]))
            bs.append(np.asarray(layer["bias"], dtype=np.float64))
        model = cls(tuple(ws), tuple(bs), doc.get("activation", "tanh"))
        if model.input_dim() != doc["input_dim"] or model.num_labels() != doc["num_labels"]:
            raise ShapeError("layer shapes disagree with the declared input_dim/num_labels")
        return model


def linear_model(weight, bias) -> MlpModel:
    """``f_j(x) = sigmoid(weight[j] . x + bias[j])``."""
    return MlpModel((np.asarray(weight, dtype=np.float64),), (np.asarray(bias, dtype=np.float64),))


def zero_model(d: int, m: int, hidden: Sequence[int] = (), activation: str = "tanh") -> MlpModel:
    sizes = [d, *hidden, m]
    ws = tuple(np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:]))
    bs = tuple(np.zeros(o) for o in sizes[1:])
    return MlpModel(ws, bs, activation)


def init_mlp(d: int, m: int, hidden: Sequence[int] = (64,), activation: str = "tanh", rng=None) -> MlpModel:
    """Random model with ``N(0, 1/fan_in)`` weights and zero biases."""
    rng = np.random.default_rng(rng)
    sizes = [d, *hidden, m]
    ws = tuple(rng.normal(0.0, 1.0 / np.sqrt(i), size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:]))
    bs = tuple(np.zeros(o) for o in sizes[1:])
    return MlpModel(ws, bs, activation)


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()) + "\n")


def load_model(path) -> MlpModel:
    return MlpModel.from_dict(json.loads(Path(path).read_text()))


def finite_difference_jacobian(model: Predictor, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of the input Jacobian (test oracle)."""
    if not h > 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    jac = np.empty((model.num_labels(), x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        jac[:, i] = (model.predict(x + e) - model.predict(x - e)) / (2.0 * h)
    return jac


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    hidden: tuple = (64,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.hidden) > 2:
            raise ParameterError("victims have at most two hidden layers")


def bce_loss(model: MlpModel, x, targets) -> float:
    """Mean over instances of the summed per-label binary cross-entropy."""
    a = model.logits(x)
    # log(1 + e^a) - t*a, written stably
    per = np.logaddexp(0.0, a) - targets * a
    return float(per.sum(axis=1).mean())


def train_victim(dataset, cfg: TrainConfig = TrainConfig()) -> MlpModel:
    """Fit a victim with minibatch SGD on per-label binary cross-entropy.

    ``dataset`` needs ``x`` (n x d array) and ``label_matrix()`` (n x m
    multi-hot). Results are bit-identical for a fixed ``cfg.seed``.
    """
    x = np.asarray(dataset.x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError("cannot train on an empty dataset")
    y = np.asarray(dataset.label_matrix(), dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise ShapeError("label matrix and inputs disagree on the number of instances")
    n, d = x.shape
    m = y.shape[1]

    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(d, m, cfg.hidden, cfg.activation, rng)
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    if cfg.epochs == 0:
        return model

    act, dact = ACTIVATIONS[cfg.activation]
    last = len(ws) - 1
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            hs, pres = [x[idx]], []
            for i in range(len(ws)):
                a = hs[-1] @ ws[i].T + bs[i]
                pres.append(a)
                hs.append(sigmoid(a) if i == last else act(a))
            delta = (hs[-1] - y[idx]) / len(idx)
            for i in range(last, -1, -1):
                gw = delta.T @ hs[i]
                gb = delta.sum(axis=0)
                if i:
                    delta = (delta @ ws[i]) * dact(pres[i - 1], hs[i])
                ws[i] -= cfg.lr * gw
                bs[i] -= cfg.lr * gb
        if logger.isEnabledFor(logging.DEBUG) and (epoch + 1) % 50 == 0:
            cur = MlpModel(tuple(ws), tuple(bs), cfg.activation)
            logger.debug("epoch %d: bce %.4f", epoch + 1, bce_loss(cur, x, y))
    return MlpModel(tuple(ws), tuple(bs), cfg.activation)
