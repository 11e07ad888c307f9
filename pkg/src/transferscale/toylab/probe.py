"""Few-shot linear probes on frozen representations, and margin / norm diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ToyModel
from .tasks import DownstreamTask, LabeledSet

DEFAULT_PROBE_L2 = 4096.0
PROBE_GRAD_TOL = 1e-8
PROBE_MAX_STEPS = 50_000
MARGIN_EPS = 1e-12


class ProbeDataError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    layer_index: int
    ds_accuracy: float
    shots: int
    l2_regularizer: float
    converged: bool = True
    grad_norm: float = 0.0


def sample_shots(data: LabeledSet, shots: int, num_classes: int, rng) -> LabeledSet:
    if shots < 1:
        raise ProbeDataError("shots must be >= 1")
    idx = []
    for c in range(num_classes):
        members = np.flatnonzero(data.y == c)
        if members.size < shots:
            raise ProbeDataError(f"class {c} has {members.size} training examples, need {shots}")
        idx.append(rng.choice(members, size=shots, replace=False))
    idx = np.sort(np.concatenate(idx))
    return LabeledSet(data.x[idx], data.y[idx])


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int,
                     l2: float = DEFAULT_PROBE_L2):
    """Multinomial logistic regression: summed cross-entropy + (l2 / 2) * ||W||^2,
    bias unpenalized, minimized by damped Newton steps on the full batch until the
    gradient 2-norm drops below PROBE_GRAD_TOL.

    Returns (W, b, converged, grad_norm).
    """
    n, dim = features.shape
    xa = np.hstack([features, np.ones((n, 1))])
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    reg = np.ones(dim + 1)
    reg[-1] = 0.0  # bias row

    def value(v):
        s = xa @ v
        s = s - s.max(axis=1, keepdims=True)
        lse = np.log(np.exp(s).sum(axis=1))
        return float(np.sum(lse - (s * onehot).sum(axis=1))) + 0.5 * l2 * float(np.sum(reg[:, None] * v * v)), s, lse

    def grad_hess(s, lse, v):
        p = np.exp(s - lse[:, None])
        g = xa.T @ (p - onehot) + l2 * reg[:, None] * v
        # per-example softmax curvature diag(p) - p p^T, contracted with x x^T
        a = np.einsum("nc,cd->ncd", p, np.eye(num_classes)) - np.einsum("nc,nd->ncd", p, p)
        h = np.einsum("ni,nj,ncd->icjd", xa, xa, a).reshape((dim + 1) * num_classes, -1)
        h += np.diag(np.repeat(l2 * reg, num_classes))
        return g, h

    v = np.zeros((dim + 1, num_classes))
    f, s, lse = value(v)
    gnorm = np.inf
    for _ in range(PROBE_MAX_STEPS):
        g, h = grad_hess(s, lse, v)
        gnorm = float(np.linalg.norm(g))
        if gnorm < PROBE_GRAD_TOL:
            break
        step = np.linalg.lstsq(h, -g.ravel(), rcond=None)[0].reshape(v.shape)
        slope = float(np.sum(g * step))
        t = 1.0
        while True:
            f_new, s_new, lse_new = value(v + t * step)
            # float slack: near the optimum f changes by less than its rounding error
            if f_new <= f + 1e-4 * t * slope + 1e-12 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        v = v + t * step
        f, s, lse = f_new, s_new, lse_new
    return v[:-1], v[-1], gnorm < PROBE_GRAD_TOL, gnorm


def few_shot_probe(model: ToyModel, layer_index: int, task: DownstreamTask, shots: int,
                   l2: float = DEFAULT_PROBE_L2, seed: int = 0) -> ProbeResult:
    rng = np.random.default_rng(seed)
    train = sample_shots(task.train, shots, task.num_classes, rng)
    f_train = model.features_at_layer(train.x, layer_index)
    w, b, converged, gnorm = fit_linear_probe(f_train, train.y, task.num_classes, l2)
    f_eval = model.features_at_layer(task.eval.x, layer_index)
    acc = float(np.mean(np.argmax(f_eval @ w + b, axis=1) == task.eval.y))
    return ProbeResult(layer_index, acc, shots, l2, converged, gnorm)


def layer_probe_sweep(model: ToyModel, task: DownstreamTask, shots: int,
                      l2: float = DEFAULT_PROBE_L2, seed: int = 0) -> list:
    """Same probe protocol (same sampled shots) on every layer 1..L."""
    return [few_shot_probe(model, i, task, shots, l2, seed) for i in range(1, model.depth + 1)]


def best_layer(results) -> int:
    """Layer with the highest probe accuracy; ties go to the lower layer."""
    best = max(results, key=lambda r: (r.ds_accuracy, -r.layer_index))
    return best.layer_index


# --- norms and margins -----------------------------------------------------------

def layer_norms(model: ToyModel, include_bias: bool = False) -> list:
    """Frobenius norm of each layer's weight matrix, layers 1..L then the head (last
    entry). ``include_bias`` adds the bias vector to the norm."""
    return [float(np.sqrt(np.sum(w * w) + (np.sum(b * b) if include_bias else 0.0)))
            for w, b in zip(model.weights, model.biases)]


def distance_to_init(model: ToyModel, include_bias: bool = False) -> list:
    out = []
    for w, b, w0, b0 in zip(model.weights, model.biases, model.init_weights, model.init_biases):
        sq = np.sum((w - w0) ** 2) + (np.sum((b - b0) ** 2) if include_bias else 0.0)
        out.append(float(np.sqrt(sq)))
    return out


def margins_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = logits.shape[0]
    correct = logits[np.arange(n), labels]
    others = logits.copy()
    others[np.arange(n), labels] = -np.inf
    return correct - others.max(axis=1)


def head_margin(model: ToyModel, data: LabeledSet) -> float:
    """Mean of s_y - max_{y' != y} s_y' over the dataset."""
    if data.y.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(margins_from_logits(model.logits(data.x), data.y)))


def normalized_layer_margins(model: ToyModel, data: LabeledSet, layer_index: int) -> np.ndarray:
    """Per-example (s_y - s_r) / (eps + ||d(s_y - s_r)/dh||) with r the runner-up class
    and h the representation at ``layer_index``, activation pattern held fixed."""
    if not 0 <= layer_index <= model.depth:
        raise IndexError(f"layer_index {layer_index} outside [0, {model.depth}]")
    zs, hs, logits = model.forward(data.x)
    n = logits.shape[0]
    y = data.y
    others = logits.copy()
    others[np.arange(n), y] = -np.inf
    r = others.argmax(axis=1)
    diff = logits[np.arange(n), y] - logits[np.arange(n), r]

    head = model.weights[-1]
    g = head[:, y].T - head[:, r].T  # d(diff)/dh_L, shape (n, width_L)
    for layer in range(model.depth, layer_index, -1):
        z, h = zs[layer - 1], hs[layer]
        dz = g * ((z > 0) if model.spec.activation == "relu" else (1.0 - h * h))
        g = dz @ model.weights[layer - 1].T
    return diff / (MARGIN_EPS + np.linalg.norm(g, axis=1))


def normalized_layer_margin(model: ToyModel, data: LabeledSet, layer_index: int) -> float:
    return float(np.mean(normalized_layer_margins(model, data, layer_index)))
