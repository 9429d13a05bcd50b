"""Adam training with early stopping on validation macro-F1."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Network, NetworkSpec, backward, forward, init_network, loss_ce, predict_proba


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 150
    max_epochs: int = 1000
    patience: int = 100
    l2_lambda: float = 0.001
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Laptop-sized profile: at most 200 epochs, patience 50, batches of 32.

        Small batches keep the number of Adam steps per epoch reasonable when
        the labeled set holds only a few hundred samples.
        """
        return cls(**{"max_epochs": 200, "patience": 50, "batch_size": 32, **overrides})

    @classmethod
    def paper_faithful(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    best_epoch: int
    best_valid_f1: float
    final_train_loss: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, t: int, config: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in Adam update: {p.shape} vs {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v)


def _as_classes(labels) -> np.ndarray:
    a = np.asarray(labels)
    if a.ndim == 2:
        return a.argmax(axis=1)
    return a.astype(np.int64)


def macro_f1(preds, targets, num_classes: int) -> float:
    """Unweighted mean of per-class F1. Accepts one-hot rows or class indices.

    A class with no true positives, false positives or false negatives scores 0.
    """
    p, t = _as_classes(preds), _as_classes(targets)
    if p.size == 0:
        raise ValueError("macro_f1 of an empty label list")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(f1.mean())


def train_network(d_train, d_valid, spec: NetworkSpec, config: TrainConfig) -> tuple[Network, TrainReport]:
    """Train from ``init_network(spec, config.seed)`` and keep the best-validation snapshot.

    ``d_train``/``d_valid`` are ``LabeledDataset``-like objects with ``samples``
    and ``labels`` (one-hot or soft rows). The dropout rate and L2 multiplier
    of ``config`` override the ones stored in ``spec``.
    """
    x_tr, y_tr = np.asarray(d_train.samples, dtype=np.float64), np.asarray(d_train.labels, dtype=np.float64)
    x_va, y_va = np.asarray(d_valid.samples, dtype=np.float64), np.asarray(d_valid.labels, dtype=np.float64)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be nonempty")
    for name, y in (("train", y_tr), ("valid", y_va)):
        if y.ndim != 2 or y.shape[1] != spec.num_classes:
            raise ValueError(f"{name} labels have arity {y.shape[-1]}, network expects {spec.num_classes}")

    spec = dataclasses.replace(spec, dropout_rate=config.dropout_rate, l2_lambda=config.l2_lambda)
    net = init_network(spec, config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    valid_classes = y_va.argmax(axis=1)

    state = AdamState.zeros_like(net.params())
    step = 0
    best_f1, best_epoch, best_params = -1.0, 0, None
    epoch, train_loss = 0, float("nan")
    n = len(x_tr)
    while epoch < config.max_epochs:
        epoch += 1
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            probs, trace = forward(net, x_tr[idx], train_mode=True, rng=dropout_rng)
            loss_sum += loss_ce(probs, y_tr[idx]) * len(idx)
            grads = backward(net, trace, y_tr[idx])
            step += 1
            new_params, state = adam_step(net.params(), grads, state, step, config)
            net.weights = new_params[0::2]
            net.biases = new_params[1::2]
            net.version += 1
        train_loss = loss_sum / n

        f1 = macro_f1(predict_proba(net, x_va).argmax(axis=1), valid_classes, spec.num_classes)
        if f1 > best_f1:
            best_f1, best_epoch = f1, epoch
            best_params = [p.copy() for p in net.params()]
        elif epoch - best_epoch >= config.patience:
            break

    net.set_params(best_params)
    return net, TrainReport(epoch, best_epoch, best_f1, float(train_loss))
