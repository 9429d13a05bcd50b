"""Feed-forward ReLU classifier with hand-written backprop.

Layers are stored as ``(W, b)`` pairs where ``W`` has shape ``(fan_in, fan_out)``
so a batch ``X`` of shape ``(n, d)`` flows through as ``X @ W + b``. Hidden
layers use ReLU followed by inverted dropout; the last layer produces logits
that are turned into probabilities by a softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EPS_LOG = 1e-12

PRESETS = {
    "LC": (64, 64),
    "BC": (128, 128, 128),
    "HC": (256, 256, 256, 256),
}


class StaleTraceError(RuntimeError):
    """Raised when backward() gets a trace that no longer matches the network."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int
    dropout_rate: float = 0.0
    l2_lambda: float = 0.0
    preset_tag: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive: {self.hidden_widths}")
        if self.preset_tag in PRESETS and not self.hidden_widths:
            raise ValueError(f"preset {self.preset_tag} needs hidden widths")
        if self.preset_tag not in (*PRESETS, "custom"):
            raise ValueError(f"unknown preset tag {self.preset_tag!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.l2_lambda < 0:
            raise ValueError(f"l2_lambda must be nonnegative, got {self.l2_lambda}")

    @classmethod
    def preset(cls, tag: str, input_dim: int, num_classes: int, **kwargs) -> "NetworkSpec":
        if tag not in PRESETS:
            raise ValueError(f"unknown preset {tag!r}, expected one of {sorted(PRESETS)}")
        return cls(input_dim, PRESETS[tag], num_classes, preset_tag=tag, **kwargs)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.num_classes]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "num_classes": self.num_classes,
            "dropout_rate": self.dropout_rate,
            "l2_lambda": self.l2_lambda,
            "preset_tag": self.preset_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=d["input_dim"],
            hidden_widths=tuple(d["hidden_widths"]),
            num_classes=d["num_classes"],
            dropout_rate=d.get("dropout_rate", 0.0),
            l2_lambda=d.get("l2_lambda", 0.0),
            preset_tag=d.get("preset_tag", "custom"),
        )


@dataclass(eq=False)
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    init_seed: int = 0
    # bumped on every in-place parameter update so old traces can be detected
    version: int = 0

    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Network":
        return Network(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.init_seed,
            self.version,
        )

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i][...] = params[2 * i]
            self.biases[i][...] = params[2 * i + 1]
        self.version += 1

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.init_seed,
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        spec = NetworkSpec.from_dict(d["spec"])
        weights = [np.asarray(layer["w"], dtype=np.float64) for layer in d["layers"]]
        biases = [np.asarray(layer["b"], dtype=np.float64) for layer in d["layers"]]
        sizes = spec.layer_sizes
        if len(weights) != len(sizes) - 1:
            raise ValueError("layer count does not match spec")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}, spec wants {sizes[i]}->{sizes[i + 1]}")
        return cls(spec, weights, biases, int(d.get("seed", 0)))

    def to_json(self) -> str:
        # json writes floats with repr(), which round-trips float64 exactly
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class Trace:
    """Intermediate values of one forward pass, consumed by backward()."""

    inputs: np.ndarray
    pre: list[np.ndarray]  # pre-activations of every layer, logits last
    acts: list[np.ndarray]  # layer inputs: inputs, then post-dropout hidden activations
    drop: list[Optional[np.ndarray]]  # inverted-dropout multipliers per hidden layer
    probs: np.ndarray
    train_mode: bool
    net_id: int
    net_version: int


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Glorot-uniform weights, zero biases; a pure function of (spec, seed)."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(spec, weights, biases, seed)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_batch(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ValueError(f"expected batch with {net.spec.input_dim} columns, got shape {np.shape(batch)}")
    return x


def logits(net: Network, batch) -> np.ndarray:
    """Evaluation-mode logits (no dropout)."""
    a = _check_batch(net, batch)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            a = np.maximum(a, 0.0)
    return a


def forward(net: Network, batch, train_mode: bool = False, rng: Optional[np.random.Generator] = None):
    """Run the network and return ``(probs, trace)``.

    Dropout is only applied when ``train_mode`` is set, and then ``rng`` must
    be supplied (unless the dropout rate is zero).
    """
    x = _check_batch(net, batch)
    rate = net.spec.dropout_rate
    if train_mode and rate > 0 and rng is None:
        raise ValueError("train_mode with dropout needs an rng")
    pre, acts, drop = [], [x], []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            if train_mode and rate > 0:
                mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
                a = a * mask
                drop.append(mask)
            else:
                drop.append(None)
            acts.append(a)
    probs = softmax(pre[-1])
    return probs, Trace(x, pre, acts, drop, probs, train_mode, id(net), net.version)


def predict_proba(net: Network, batch, chunk: int = 8192) -> np.ndarray:
    x = _check_batch(net, batch)
    if len(x) <= chunk:
        return softmax(logits(net, x))
    return np.concatenate([softmax(logits(net, x[i:i + chunk])) for i in range(0, len(x), chunk)])


def predict_top1(net: Network, batch) -> np.ndarray:
    """One-hot argmax labels; ties go to the lowest class index."""
    probs = predict_proba(net, batch)
    return one_hot(probs.argmax(axis=1), net.spec.num_classes)


def one_hot(classes, num_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((classes.size, num_classes))
    out[np.arange(classes.size), classes] = 1.0
    return out


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def loss_ce(probs, targets) -> float:
    """Mean cross-entropy; targets may be one-hot or soft distributions."""
    p, t = _check_pair(probs, targets)
    return float(np.mean(-np.sum(t * np.log(p + EPS_LOG), axis=1)))


def loss_mse(preds, targets) -> float:
    p, t = _check_pair(preds, targets)
    return float(np.mean(np.sum((t - p) ** 2, axis=1)))


def l2_penalty(net: Network, l2_lambda: Optional[float] = None) -> float:
    lam = net.spec.l2_lambda if l2_lambda is None else l2_lambda
    return 0.5 * lam * sum(float(np.sum(p * p)) for p in net.params())


def objective(net: Network, batch, targets, l2_lambda: Optional[float] = None) -> float:
    """Deterministic training objective (no dropout): CE plus L2 penalty."""
    probs, _ = forward(net, batch)
    return loss_ce(probs, targets) + l2_penalty(net, l2_lambda)


def backward(net: Network, trace: Optional[Trace], targets, l2_lambda: Optional[float] = None) -> list[np.ndarray]:
    """Gradients of ``loss_ce + l2/2 * |theta|^2`` in the order of ``net.params()``.

    The softmax/CE pair is differentiated jointly as ``(p - t) / n``; the
    log floor only guards the reported loss value.
    """
    if trace is None:
        raise StaleTraceError("backward() needs the trace of a forward() call")
    if trace.net_id != id(net) or trace.net_version != net.version:
        raise StaleTraceError("trace was produced by a different network state")
    if not trace.train_mode:
        raise StaleTraceError("trace must come from a forward() call with train_mode set")
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape != trace.probs.shape:
        raise ValueError(f"targets shape {t.shape} does not match outputs {trace.probs.shape}")
    lam = net.spec.l2_lambda if l2_lambda is None else l2_lambda

    n = t.shape[0]
    delta = (trace.probs - t) / n
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = trace.acts[i]
        grads[2 * i] = a_in.T @ delta + lam * net.weights[i]
        grads[2 * i + 1] = delta.sum(axis=0) + lam * net.biases[i]
        if i > 0:
            delta = delta @ net.weights[i].T
            if trace.drop[i - 1] is not None:
                delta = delta * trace.drop[i - 1]
            delta = delta * (trace.pre[i - 1] > 0)
    return grads


def input_jacobian(net: Network, batch) -> np.ndarray:
    """Jacobian of the logits w.r.t. the inputs, shape ``(n, J, d)``, dropout off."""
    x = _check_batch(net, batch)
    masks = []
    a = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = a @ w + b
        masks.append(z > 0)
        a = np.maximum(z, 0.0)
    # walk back from the logits: J_l = J_{l+1} * mask_l @ W_l^T
    jac = np.broadcast_to(net.weights[-1].T, (x.shape[0], *net.weights[-1].T.shape))
    for i in range(len(masks) - 1, -1, -1):
        jac = (jac * masks[i][:, None, :]) @ net.weights[i].T
    return np.ascontiguousarray(jac)


def input_gradient(net: Network, x, class_index: int) -> np.ndarray:
    """Gradient of one logit with respect to a single input sample."""
    if not 0 <= class_index < net.spec.num_classes:
        raise IndexError(f"class_index {class_index} out of range for {net.spec.num_classes} classes")
    return input_jacobian(net, np.asarray(x, dtype=np.float64).reshape(1, -1))[0, class_index]
