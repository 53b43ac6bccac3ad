"""Multitask feedforward net with per-example dropout, trained by SGD with
momentum, weight decay, and a per-unit max-norm constraint.

The net shares two ReLU hidden layers across M task heads; each head emits a
real score F_m whose sign is the decision and whose logistic transform is the
probability.  Train mode applies Bernoulli keep-masks to the input vector and
to every hidden activation (including the last hidden layer feeding the
heads); test mode keeps all units and scales every dropout-affected layer
input by the keep rate.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .util import derive_seed, sigmoid


@dataclass
class NetArchitecture:
    n_inputs: int
    hidden: tuple = (50, 50)
    n_tasks: int = 6
    dropout_keep: float = 0.5

    def validate(self):
        if self.n_inputs < 1 or self.n_tasks < 1 or not self.hidden:
            raise ConfigError("architecture needs inputs, tasks, and at least one hidden layer")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ConfigError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")


@dataclass
class TrainSchedule:
    minibatch: int = 64
    lr_start: float = 0.1
    lr_stop: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_norm: float = 1.0
    plateau_rel: float = 1e-4
    patience: int = 2
    max_epochs: int = 200


class DnndNet:
    """Weights are (out, in) matrices; layer l consumes the masked (train)
    or keep-rate-scaled (test) activation of layer l-1."""

    def __init__(self, arch: NetArchitecture, weights, biases):
        self.arch = arch
        self.weights = weights
        self.biases = biases

    def clone(self) -> "DnndNet":
        return DnndNet(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def hidden_row_norms(self):
        """Incoming-vector norms for every hidden unit (heads excluded)."""
        return [np.linalg.norm(w, axis=1) for w in self.weights[:-1]]

    def to_state(self) -> dict:
        return {
            "n_inputs": int(self.arch.n_inputs),
            "hidden": [int(h) for h in self.arch.hidden],
            "n_tasks": int(self.arch.n_tasks),
            "dropout_keep": float(self.arch.dropout_keep),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_state(cls, state: dict) -> "DnndNet":
        arch = NetArchitecture(
            n_inputs=state["n_inputs"],
            hidden=tuple(state["hidden"]),
            n_tasks=state["n_tasks"],
            dropout_keep=state["dropout_keep"],
        )
        weights = [np.array(w, dtype=float) for w in state["weights"]]
        biases = [np.array(b, dtype=float) for b in state["biases"]]
        return cls(arch, weights, biases)


def init_network(arch: NetArchitecture, seed: int) -> DnndNet:
    """Zero-mean normal weights with variance 2/fan_in; zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    sizes = [arch.n_inputs] + list(arch.hidden) + [arch.n_tasks]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return DnndNet(arch, weights, biases)


def draw_masks(arch: NetArchitecture, batch_size: int, rng) -> list:
    """Per-example Bernoulli(keep) masks for the input and every hidden layer."""
    widths = [arch.n_inputs] + list(arch.hidden)
    return [
        (rng.random((batch_size, w)) < arch.dropout_keep).astype(float) for w in widths
    ]


def forward_dropout(net: DnndNet, X, mode: str = "train", masks=None, rng=None):
    """Returns (scores, cache).  Train mode multiplies each layer input by its
    mask; test mode scales each layer input by the keep rate instead."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    arch = net.arch
    if X.shape[1] != arch.n_inputs:
        raise DataError(f"net expects {arch.n_inputs} inputs, got {X.shape[1]}")
    n_hidden = len(arch.hidden)
    if mode == "test":
        r = arch.dropout_keep
        a = X * r
        pre = []
        for l in range(n_hidden):
            z = a @ net.weights[l].T + net.biases[l]
            pre.append(z)
            a = np.maximum(z, 0.0) * r
        scores = a @ net.weights[-1].T + net.biases[-1]
        return scores, {"mode": "test", "pre": pre}
    if mode != "train":
        raise ConfigError(f"mode must be train or test, got {mode!r}")
    if masks is None:
        if rng is None:
            raise ConfigError("train mode needs masks or an rng to draw them")
        masks = draw_masks(arch, X.shape[0], rng)
    if len(masks) != n_hidden + 1:
        raise ConfigError(f"expected {n_hidden + 1} masks, got {len(masks)}")
    masked = [X * masks[0]]
    pre = []
    a = masked[0]
    for l in range(n_hidden):
        z = a @ net.weights[l].T + net.biases[l]
        pre.append(z)
        h = np.maximum(z, 0.0) * masks[l + 1]
        masked.append(h)
        a = h
    scores = a @ net.weights[-1].T + net.biases[-1]
    cache = {"mode": "train", "masks": masks, "masked": masked, "pre": pre}
    return scores, cache


def multitask_loss(scores, labels) -> float:
    """Mean over examples of the summed per-task logistic losses
    log(1 + exp(-y_m F_m)), evaluated stably."""
    F = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if F.shape != y.shape:
        raise DataError(f"scores {F.shape} and labels {y.shape} do not align")
    per_task = np.logaddexp(0.0, -y * F)
    if per_task.ndim == 1:
        return float(per_task.sum())
    return float(per_task.sum(axis=1).mean())


def backward_dropout(net: DnndNet, scores, cache, labels) -> dict:
    """Gradients of multitask_loss w.r.t. every weight and bias, with masks
    applied exactly where the forward pass applied them."""
    if cache.get("mode") != "train":
        raise ConfigError("backward pass needs a train-mode cache")
    F = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    B = F.shape[0]
    masks = cache["masks"]
    masked = cache["masked"]
    pre = cache["pre"]
    n_hidden = len(net.arch.hidden)

    dF = -(y * sigmoid(-y * F)) / B
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    grads_w[-1] = dF.T @ masked[-1]
    grads_b[-1] = dF.sum(axis=0)
    da = dF @ net.weights[-1]
    for l in range(n_hidden - 1, -1, -1):
        dz = da * masks[l + 1] * (pre[l] > 0.0)
        grads_w[l] = dz.T @ masked[l]
        grads_b[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ net.weights[l]
    return {"weights": grads_w, "biases": grads_b}


def init_velocity(net: DnndNet) -> dict:
    return {
        "weights": [np.zeros_like(w) for w in net.weights],
        "biases": [np.zeros_like(b) for b in net.biases],
    }


def sgd_step(net: DnndNet, grads: dict, velocity: dict, lr: float, schedule: TrainSchedule):
    """velocity <- momentum*velocity - lr*(grad + decay*weight); weight +=
    velocity; then each hidden unit's incoming vector is rescaled onto the
    max-norm ball.  Biases see no decay and no norm constraint."""
    mom, wd, cap = schedule.momentum, schedule.weight_decay, schedule.max_norm
    for l, w in enumerate(net.weights):
        v = velocity["weights"][l]
        v *= mom
        v -= lr * (grads["weights"][l] + wd * w)
        w += v
        if l < len(net.weights) - 1 and cap is not None:
            norms = np.linalg.norm(w, axis=1)
            over = norms > cap
            if over.any():
                w[over] *= (cap / norms[over])[:, None]
    for l, b in enumerate(net.biases):
        v = velocity["biases"][l]
        v *= mom
        v -= lr * grads["biases"][l]
        b += v


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    warnings: list = field(default_factory=list)


def train_dnnd(
    X, Y, arch: NetArchitecture, schedule: TrainSchedule = TrainSchedule(), seed: int = 0
):
    """Minibatch SGD with fresh per-example masks each batch.

    The epoch loss is the batch-size-weighted mean of the masked minibatch
    losses.  When it fails to improve on the best epoch by more than
    plateau_rel (relative) for `patience` consecutive epochs, the rate halves;
    training stops when the rate falls below lr_stop or at max_epochs.
    Returns (net at the best recorded epoch, TrainReport).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = X.shape[0]
    if Y.shape[0] != n:
        raise DataError(f"X has {n} rows but Y has {Y.shape[0]}")
    if Y.shape[1] != arch.n_tasks:
        raise DataError(f"architecture has {arch.n_tasks} tasks but Y has {Y.shape[1]} columns")
    if not np.isin(Y, (-1, 1)).all():
        raise DataError("labels must be -1/+1")
    report = TrainReport()
    if n == 1:
        msg = "training on a single example; the fit is a memorization artifact"
        warnings.warn(msg)
        report.warnings.append(msg)

    net = init_network(arch, derive_seed(seed, "init"))
    rng = np.random.default_rng(derive_seed(seed, "train"))
    velocity = init_velocity(net)
    lr = schedule.lr_start
    best_net = net.clone()
    stall = 0

    for epoch in range(schedule.max_epochs):
        if lr < schedule.lr_stop:
            break
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, schedule.minibatch):
            rows = perm[start : start + schedule.minibatch]
            masks = draw_masks(arch, rows.size, rng)
            scores, cache = forward_dropout(net, X[rows], mode="train", masks=masks)
            loss = multitask_loss(scores, Y[rows])
            grads = backward_dropout(net, scores, cache, Y[rows])
            sgd_step(net, grads, velocity, lr, schedule)
            total += loss * rows.size
        epoch_loss = total / n
        report.epoch_losses.append(epoch_loss)
        report.lr_history.append(lr)
        if epoch_loss < report.best_loss * (1.0 - schedule.plateau_rel) or epoch == 0:
            if epoch_loss < report.best_loss:
                report.best_loss = epoch_loss
                report.best_epoch = epoch
                best_net = net.clone()
            stall = 0
        else:
            if epoch_loss < report.best_loss:
                # improved, but not beyond the plateau threshold
                report.best_loss = epoch_loss
                report.best_epoch = epoch
                best_net = net.clone()
            stall += 1
            if stall >= schedule.patience:
                lr *= 0.5
                stall = 0
    return best_net, report


def predict_dnnd(net: DnndNet, X) -> np.ndarray:
    """Test-mode task scores; probability is sigmoid(F), label +1 iff F >= 0."""
    scores, _ = forward_dropout(net, X, mode="test")
    return scores


def dnnd_probabilities(scores) -> np.ndarray:
    return sigmoid(np.asarray(scores, dtype=float))


def dnnd_labels(scores) -> np.ndarray:
    return np.where(np.asarray(scores) >= 0.0, 1, -1)
