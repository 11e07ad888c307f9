"""Small fully-connected classifier trained with plain mini-batch gradient descent.

Layer convention: layer 0 is the raw input, layers 1..L are the hidden
(post-activation) representations, layer L is the pre-logit layer, and the
head maps layer L to class scores. Every layer, head included, owns a weight
matrix ``W`` of shape (fan_in, fan_out) and a bias vector ``b``; the parameter
count is therefore sum((fan_in + 1) * fan_out).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ToyModelSpec:
    input_dim: int
    hidden_dims: tuple
    num_classes: int
    activation: str = "relu"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all dimensions must be >= 1")
        if len(self.hidden_dims) < 2:
            raise ValueError("need at least two hidden layers")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class TrainOptions:
    body_lr: float = 0.05
    head_lr: float = 0.05
    body_wd: float = 0.01
    head_wd: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (self.body_lr >= 0 and self.head_lr >= 0):
            raise ValueError("learning rates must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.body_wd < 0 or self.head_wd < 0:
            raise ValueError("weight decays must be nonnegative")


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - h * h


class ToyModel:
    def __init__(self, spec: ToyModelSpec, weights: list, biases: list,
                 init_weights: Optional[list] = None, init_biases: Optional[list] = None):
        self.spec = spec
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.init_weights = [w.copy() for w in (init_weights if init_weights is not None else self.weights)]
        self.init_biases = [b.copy() for b in (init_biases if init_biases is not None else self.biases)]

    @property
    def depth(self) -> int:
        """Index of the pre-logit layer (number of hidden layers)."""
        return len(self.spec.hidden_dims)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "ToyModel":
        return ToyModel(self.spec, self.weights, self.biases, self.init_weights, self.init_biases)

    # forward / backward -----------------------------------------------------

    def forward(self, x: np.ndarray):
        """Returns (pre-activations, representations h_0..h_L, logits)."""
        hs = [np.asarray(x, dtype=np.float64)]
        zs = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = hs[-1] @ w + b
            zs.append(z)
            hs.append(_act(z, self.spec.activation))
        logits = hs[-1] @ self.weights[-1] + self.biases[-1]
        return zs, hs, logits

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[2]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean softmax cross-entropy and its gradients (weights, biases)."""
        zs, hs, logits = self.forward(x)
        n = x.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logsumexp - shifted[np.arange(n), y]))
        probs = np.exp(shifted - logsumexp[:, None])
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = hs[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                dh = delta @ self.weights[i].T
                delta = dh * _act_grad(zs[i - 1], hs[i], self.spec.activation)
        return loss, gw, gb

    def features_at_layer(self, x: np.ndarray, layer_index: int) -> np.ndarray:
        if not 0 <= layer_index <= self.depth:
            raise IndexError(f"layer_index {layer_index} outside [0, {self.depth}]")
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights[:layer_index], self.biases[:layer_index]):
            h = _act(h @ w + b, self.spec.activation)
        return h

    # checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        """One JSON header line, then little-endian float64 arrays in row-major order:
        W_1, b_1, ..., W_head, b_head for the current weights, then the same for the
        initial weights."""
        header = {
            "format": "transferscale-toymodel-v1",
            "spec": {"input_dim": self.spec.input_dim, "hidden_dims": list(self.spec.hidden_dims),
                     "num_classes": self.spec.num_classes, "activation": self.spec.activation,
                     "init_scale": self.spec.init_scale, "seed": self.spec.seed},
            "shapes": [list(w.shape) for w in self.weights],
            "dtype": "<f8",
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for group in ((self.weights, self.biases), (self.init_weights, self.init_biases)):
                for w, b in zip(*group):
                    fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                    fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ToyModel":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        spec = ToyModelSpec(**header["spec"])
        shapes = [tuple(s) for s in header["shapes"]]
        offset = 0

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
            return arr.astype(np.float64)

        groups = []
        for _ in range(2):
            ws, bs = [], []
            for shape in shapes:
                ws.append(take(shape))
                bs.append(take((shape[1],)))
            groups.append((ws, bs))
        if offset != len(payload):
            raise ValueError("checkpoint payload size does not match its header")
        (ws, bs), (iw, ib) = groups
        return cls(spec, ws, bs, iw, ib)


def build_model(spec: ToyModelSpec) -> ToyModel:
    """Weights ~ N(0, 1/fan_in) * init_scale, biases zero."""
    rng = np.random.default_rng(spec.seed)
    dims = [spec.input_dim, *spec.hidden_dims, spec.num_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * (spec.init_scale / np.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    return ToyModel(spec, weights, biases)


def apply_step(model: ToyModel, gw: Sequence[np.ndarray], gb: Sequence[np.ndarray], opts: TrainOptions) -> None:
    """Decoupled weight decay on weight matrices, then the gradient step. Biases are not decayed."""
    last = len(model.weights) - 1
    for i in range(len(model.weights)):
        lr, wd = (opts.head_lr, opts.head_wd) if i == last else (opts.body_lr, opts.body_wd)
        if wd:
            model.weights[i] *= 1.0 - lr * wd
        model.weights[i] -= lr * gw[i]
        model.biases[i] -= lr * gb[i]


@dataclass
class TrainingTrace:
    epoch_loss: list = field(default_factory=list)
    epoch_us_accuracy: list = field(default_factory=list)
    steps: int = 0


def train_upstream(model: ToyModel, x: np.ndarray, y: np.ndarray, opts: TrainOptions):
    """Train a copy of ``model``; returns (trained model, trace)."""
    model = model.copy()
    rng = np.random.default_rng(opts.seed)
    trace = TrainingTrace()
    # overflow on the way to divergence is expected; the finiteness checks below report it
    with np.errstate(over="ignore", invalid="ignore"):
        _train_epochs(model, x, y, opts, rng, trace)
    return model, trace


def _train_epochs(model, x, y, opts, rng, trace) -> None:
    n = x.shape[0]
    step = 0
    for _ in range(opts.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            loss, gw, gb = model.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            apply_step(model, gw, gb, opts)
            losses.append(loss)
            step += 1
        if not all(np.all(np.isfinite(w)) for w in model.weights):
            raise TrainingDivergedError(step, float("nan"))
        trace.epoch_loss.append(float(np.mean(losses)))
        trace.epoch_us_accuracy.append(model.accuracy(x, y))
    trace.steps = step
