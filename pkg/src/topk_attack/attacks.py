"""Adversarial perturbations against top-k multi-label predictors.

Three attacks share one projected (sub)gradient loop over a perturbation
``z`` and a scalar threshold ``lam``:

* untargeted: push every true label out of the top-k,
* universal: one ``z`` that fools a fraction ``xi`` of a dataset,
* targeted: make a chosen set of k non-true labels exactly the top-k.

The untargeted and targeted losses replace the explicit top-k sort by the
average-of-top-k variational form, so for fixed ``lam`` they are sums of
hinges and their subgradients only need the active hinge set. ``mlap`` is
the pairwise max/min hinge baseline for the targeted setting.

After every step ``lam`` is clamped to [0, 1], ``z`` is projected onto the
l2 ball of radius ``epsilon`` (unless projection is disabled) and ``x + z``
is clipped into the input box.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .evaluation import LabelSet, TargetSet, label_consistency, top_k_set, truth_cleared, uasr
from .topk_math import as_scores, hinge, rank_desc

logger = logging.getLogger(__name__)

MODES = ("untargeted", "universal", "targeted", "mlap")
DEFAULT_EPSILON = {"untargeted": 10.0, "universal": 100.0, "targeted": 2.0, "mlap": 2.0}


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters shared by all attacks.

    ``beta`` weighs the ``(beta/2)||z||^2`` penalty; the default relies on
    the l2 projection instead. ``early_stop`` only affects the targeted
    loops, which otherwise run the full ``max_iter`` steps.
    """

    k: int
    eta: float = 0.01
    max_iter: int = 1000
    beta: float = 0.0
    epsilon: float = 10.0
    projection: bool = True
    clip_low: float = -1.0
    clip_high: float = 1.0
    seed: int = 0
    early_stop: bool = False

    def __post_init__(self):
        if isinstance(self.k, bool) or int(self.k) != self.k or self.k < 1:
            raise ParameterError(f"k must be a positive integer, got {self.k}")
        if not self.eta > 0:
            raise ParameterError(f"eta must be positive, got {self.eta}")
        if self.max_iter < 1:
            raise ParameterError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.beta >= 0:
            raise ParameterError(f"beta must be >= 0, got {self.beta}")
        if self.projection and not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive when projection is enabled, got {self.epsilon}")
        if not self.clip_low < self.clip_high:
            raise ParameterError(f"clip_low ({self.clip_low}) must be below clip_high ({self.clip_high})")

    @classmethod
    def for_mode(cls, mode: str, k: int, **overrides) -> "AttackConfig":
        """Config with the default projection radius for ``mode``."""
        if mode not in DEFAULT_EPSILON:
            raise ParameterError(f"unknown attack mode {mode!r}; expected one of {MODES}")
        overrides.setdefault("epsilon", DEFAULT_EPSILON[mode])
        return cls(k=k, **overrides)

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def check_labels(self, m: int) -> None:
        if not 1 <= self.k <= m - 1:
            raise ParameterError(f"k must lie in [1, {m - 1}] for m={m} labels, got {self.k}")


@dataclass(frozen=True, eq=False)
class Perturbation:
    z: np.ndarray

    @property
    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.z))


@dataclass(frozen=True, eq=False)
class AttackResult:
    success: bool
    perturbation: Perturbation
    iterations_used: int
    final_scores: np.ndarray
    final_lambda: float

    def top_k(self, k: int) -> list:
        return rank_desc(self.final_scores).sorted_indices[:k].tolist()

    def to_record(self, instance_id: int, k: int) -> dict:
        return {
            "instance": int(instance_id),
            "success": bool(self.success),
            "norm": self.perturbation.l2_norm,
            "iterations": int(self.iterations_used),
            "topk": self.top_k(k),
        }


@dataclass(frozen=True, eq=False)
class UniversalResult:
    z: Perturbation
    training_uasr: float
    epochs_used: int
    converged: bool


# -- shared plumbing ---------------------------------------------------------


def project_l2(z, epsilon: float) -> np.ndarray:
    """Radial projection onto ``{z : ||z||_2 <= epsilon}``."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z)
    if norm <= epsilon:
        return z.copy()
    out = z * (epsilon / norm)
    # rounding can leave the norm an ulp above epsilon; shrink until inside
    # so that a second projection is exactly the identity
    while np.linalg.norm(out) > epsilon:
        out = out * (1.0 - 2.0**-52)
    return out


def clip_perturbation(x, z, low: float, high: float) -> np.ndarray:
    """Return ``z'`` with ``x + z'`` inside ``[low, high]`` coordinate-wise."""
    z = np.clip(x + z, low, high) - x
    # x + (c - x) can round past c; walk the offending coordinates inward
    for _ in range(64):
        over = x + z > high
        under = x + z < low
        if not (over.any() or under.any()):
            break
        z[over] = np.nextafter(z[over], -np.inf)
        z[under] = np.nextafter(z[under], np.inf)
    return z


def _scores_and_jacobian(model, x):
    if hasattr(model, "predict_with_jacobian"):
        return model.predict_with_jacobian(x)
    return model.predict(x), model.input_jacobian(x)


def _check_input(model, x, cfg: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim(),):
        raise ParameterError(f"expected an input of length {model.input_dim()}, got shape {x.shape}")
    if np.any(x < cfg.clip_low) or np.any(x > cfg.clip_high):
        raise ParameterError(f"input lies outside the box [{cfg.clip_low}, {cfg.clip_high}]")
    cfg.check_labels(model.num_labels())
    return x


def _check_lambda(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return float(lam)


def _finish_step(x, z, lam, cfg: AttackConfig):
    lam = min(max(lam, 0.0), 1.0)
    if cfg.projection:
        z = project_l2(z, cfg.epsilon)
    return clip_perturbation(x, z, cfg.clip_low, cfg.clip_high), lam


def _top_true_label(f, truth: LabelSet) -> int:
    if len(truth) == 0:
        raise ParameterError("the true label set must be non-empty")
    idx = list(truth.indices)
    # indices are sorted, so argmax's first hit is the smallest tied label
    return idx[int(np.argmax(f[idx]))]


# -- untargeted --------------------------------------------------------------


def untargeted_loss(scores, truth: LabelSet, k: int, lam: float) -> float:
    """``lam + (1/(m-k)) * sum_j [max_{y in Y} f_y - f_j - lam]_+``.

    Upper-bounds ``[max_{y in Y} f_y - f_[k+1]]_+``, which is zero exactly
    when no true label can sit in the top-k.
    """
    f = as_scores(scores, calibrated=True)
    m = f.size
    if not 1 <= k <= m - 1:
        raise ParameterError(f"k must lie in [1, {m - 1}], got {k}")
    lam = _check_lambda(lam)
    top = f[_top_true_label(f, truth)]
    return lam + float(np.sum(hinge(top - f - lam))) / (m - k)


def untargeted_gradient(f, jac, truth: LabelSet, k: int, lam: float):
    """Subgradient of ``untargeted_loss`` w.r.t. the input and ``lam``."""
    m = f.size
    yp = _top_true_label(f, truth)
    active = (f[yp] - f) > lam
    n_active = int(active.sum())
    grad_z = (n_active * jac[yp] - jac[active].sum(axis=0)) / (m - k)
    grad_lam = 1.0 - n_active / (m - k)
    return grad_z, grad_lam


def _untargeted_update(f, jac, x, z, lam, truth, cfg: AttackConfig):
    grad_z, grad_lam = untargeted_gradient(f, jac, truth, cfg.k, lam)
    z_new = (1.0 - cfg.beta * cfg.eta) * z - cfg.eta * grad_z
    return _finish_step(x, z_new, lam - cfg.eta * grad_lam, cfg)


def untargeted_step(model, x, z, lam: float, truth: LabelSet, cfg: AttackConfig):
    """One joint update of ``(z, lam)`` for the untargeted loss."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    f, jac = _scores_and_jacobian(model, x + z)
    return _untargeted_update(f, jac, x, z, _check_lambda(lam), truth, cfg)


def attack_untargeted(model, x, truth: LabelSet, cfg: AttackConfig) -> AttackResult:
    """Iterate untargeted steps from ``z = 0, lam = 0`` until every true
    label has left the top-k, or for ``cfg.max_iter`` steps.

    Stopping at the first partial overlap would already break consistency
    at ``k`` but could leave a true label at rank 1, so success is the
    stronger condition ``max_{y in Y} f_y`` ranked below position k.
    """
    x = _check_input(model, x, cfg)
    if len(truth) == 0:
        raise ParameterError("the true label set must be non-empty")
    z = np.zeros_like(x)
    lam = 0.0
    it = 0
    while True:
        f, jac = _scores_and_jacobian(model, x + z)
        fooled = truth_cleared(f, truth, cfg.k)
        if fooled or it >= cfg.max_iter:
            break
        z, lam = _untargeted_update(f, jac, x, z, lam, truth, cfg)
        it += 1
    return AttackResult(fooled, Perturbation(z), it, f, lam)


# -- universal ---------------------------------------------------------------


def attack_universal(model, dataset, cfg: AttackConfig, xi: float = 0.7, max_epochs: int = 20) -> UniversalResult:
    """Accumulate one perturbation over a dataset.

    Each epoch visits the instances in order; for any instance not yet
    fooled by ``z`` an unprojected untargeted attack is run from the clipped
    point ``x_i + z`` and its perturbation is added to ``z``, which is then
    projected back onto the ``epsilon`` ball. Stops once the universal
    success rate reaches ``xi`` or after ``max_epochs`` epochs.
    """
    if len(dataset) == 0:
        raise ParameterError("cannot fit a universal perturbation on an empty dataset")
    if not 0.0 < xi <= 1.0:
        raise ParameterError(f"xi must lie in (0, 1], got {xi}")
    if max_epochs < 0:
        raise ParameterError(f"max_epochs must be >= 0, got {max_epochs}")
    cfg.check_labels(model.num_labels())
    inner = cfg.replace(projection=False)
    low, high = cfg.clip_low, cfg.clip_high

    z = np.zeros(model.input_dim())
    rate = uasr(model, dataset, z, cfg.k, low, high)
    epochs = 0
    while rate < xi and epochs < max_epochs:
        for x_i, y_i in dataset:
            base = np.clip(x_i + z, low, high)
            if label_consistency(model.predict(base), y_i, cfg.k) != 0:
                res = attack_untargeted(model, base, y_i, inner)
                z = z + res.perturbation.z
                if cfg.projection:
                    z = project_l2(z, cfg.epsilon)
        epochs += 1
        rate = uasr(model, dataset, z, cfg.k, low, high)
        logger.info("universal epoch %d: uasr %.3f, ||z|| %.3f", epochs, rate, np.linalg.norm(z))
    return UniversalResult(Perturbation(z), rate, epochs, rate >= xi)


# -- targeted ----------------------------------------------------------------


def targeted_loss(scores, target: TargetSet, lam: float) -> float:
    """``sum_j [s_j (lam - f_j)]_+`` with ``s_j = +1`` on targets, -1 elsewhere.

    At ``lam`` equal to the k-th largest score this is the top-k sum minus
    the targets' total score, which is zero exactly when the targets fill
    the top-k.
    """
    f = as_scores(scores, calibrated=True)
    if target.m != f.size:
        raise ParameterError(f"target set is over {target.m} labels, got {f.size} scores")
    lam = _check_lambda(lam)
    return float(np.sum(hinge(target.signs() * (lam - f))))


def targeted_gradient(f, jac, target: TargetSet, lam: float):
    s = target.signs()
    active = s * (lam - f) > 0
    grad_z = -(s[active] @ jac[active])
    grad_lam = float(s[active].sum())
    return grad_z, grad_lam


def _targeted_update(f, jac, x, z, lam, target, cfg: AttackConfig):
    grad_z, grad_lam = targeted_gradient(f, jac, target, lam)
    z_new = (1.0 - cfg.beta * cfg.eta) * z - cfg.eta * grad_z
    return _finish_step(x, z_new, lam - cfg.eta * grad_lam, cfg)


def targeted_step(model, x, z, lam: float, target: TargetSet, cfg: AttackConfig):
    """One joint update of ``(z, lam)`` for the targeted loss."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    f, jac = _scores_and_jacobian(model, x + z)
    return _targeted_update(f, jac, x, z, _check_lambda(lam), target, cfg)


def mlap_targeted_loss(scores, target: TargetSet) -> float:
    """``[max_{j not in P} f_j - min_{j in P} f_j]_+`` for target set ``P``."""
    f = as_scores(scores)
    if target.m != f.size:
        raise ParameterError(f"target set is over {target.m} labels, got {f.size} scores")
    mask = target.labels.vector().astype(bool)
    return hinge(float(f[~mask].max() - f[mask].min()))


def mlap_gradient(f, jac, target: TargetSet):
    """Subgradient: ``J_a - J_b`` for the top non-target ``a`` and the bottom
    target ``b`` when the loss is positive, else zero."""
    mask = target.labels.vector().astype(bool)
    others = np.flatnonzero(~mask)
    targets = np.flatnonzero(mask)
    a = others[int(np.argmax(f[others]))]
    b = targets[int(np.argmin(f[targets]))]
    if f[a] - f[b] > 0:
        return jac[a] - jac[b]
    return np.zeros(jac.shape[1])


def _targeted_loop(model, x, target: TargetSet, cfg: AttackConfig, update) -> AttackResult:
    x = _check_input(model, x, cfg)
    if target.m != model.num_labels():
        raise ParameterError(f"target set is over {target.m} labels, model has {model.num_labels()}")
    if target.k != cfg.k:
        raise ParameterError(f"target set has {target.k} labels but k={cfg.k}")
    z = np.zeros_like(x)
    lam = 0.0
    best = None
    it = 0
    while True:
        f, jac = _scores_and_jacobian(model, x + z)
        if top_k_set(f, cfg.k) == target.labels:
            norm = float(np.linalg.norm(z))
            if best is None or norm < best[0]:
                best = (norm, z.copy(), it, f, lam)
            if cfg.early_stop:
                break
        if it >= cfg.max_iter:
            break
        z, lam = update(f, jac, x, z, lam)
        it += 1
    if best is not None:
        _, bz, bit, bf, blam = best
        return AttackResult(True, Perturbation(bz), bit, bf, blam)
    return AttackResult(False, Perturbation(z), it, f, lam)


def attack_targeted(model, x, target: TargetSet, cfg: AttackConfig) -> AttackResult:
    """Run the targeted updates from ``z = 0, lam = 0``.

    Success means the top-k set equals the target set. All ``max_iter``
    steps are taken unless ``cfg.early_stop``; the smallest-norm successful
    iterate is returned, or the last iterate if none succeeded.
    """
    return _targeted_loop(
        model, x, target, cfg, lambda f, jac, x, z, lam: _targeted_update(f, jac, x, z, lam, target, cfg)
    )


def attack_mlap(model, x, target: TargetSet, cfg: AttackConfig) -> AttackResult:
    """Pairwise-hinge baseline in the same loop as ``attack_targeted``.

    There is no threshold variable, so ``final_lambda`` is always 0.
    """

    def update(f, jac, x, z, lam):
        z_new = (1.0 - cfg.beta * cfg.eta) * z - cfg.eta * mlap_gradient(f, jac, target)
        return _finish_step(x, z_new, 0.0, cfg)

    return _targeted_loop(model, x, target, cfg, update)


def write_perturbations_csv(path, rows) -> None:
    """Dump ``(instance_id, z)`` pairs, one row per perturbation."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for instance_id, z in rows:
            w.writerow([instance_id, *(repr(float(v)) for v in z)])


def read_perturbations_csv(path) -> dict:
    with Path(path).open(newline="") as fh:
        return {int(row[0]): np.array([float(v) for v in row[1:]]) for row in csv.reader(fh) if row}
