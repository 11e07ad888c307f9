"""Head weight-decay / learning-rate sweeps with per-point diagnostics, plus the
reference configuration used by the mechanism checks."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..statlab import UndefinedCorrelationError, spearman
from .model import ToyModel, ToyModelSpec, TrainOptions, _act, build_model, train_upstream
from .probe import (DEFAULT_PROBE_L2, distance_to_init, few_shot_probe, head_margin, layer_norms,
                    normalized_layer_margin)
from .tasks import SyntheticTask, SyntheticTaskSpec

AXES = ("head_wd", "head_lr")
REFERENCE_WD_GRID = (0.0, 0.01, 0.1, 0.5, 1.0, 3.0)
REFERENCE_HIDDEN = (64, 64, 64)
REFERENCE_INIT_SCALE = 2.0
REFERENCE_LR = 0.02
REFERENCE_EPOCHS = 100

SWEEP_CSV_COLUMNS = ("grid_value", "us_accuracy", "ds_task", "shots", "ds_accuracy", "head_norm",
                     "body_norm_sum", "head_margin", "prelogit_margin")


def reference_task_spec(seed: int = 0) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(seed=seed)


def reference_model_spec(task_spec: SyntheticTaskSpec, seed: int = 0) -> ToyModelSpec:
    return ToyModelSpec(task_spec.input_dim, REFERENCE_HIDDEN, task_spec.num_classes, "relu",
                        REFERENCE_INIT_SCALE, seed)


def reference_train_options(seed: int = 0, **overrides) -> TrainOptions:
    base = TrainOptions(body_lr=REFERENCE_LR, head_lr=REFERENCE_LR, body_wd=0.01, head_wd=0.01,
                        epochs=REFERENCE_EPOCHS, batch_size=32, seed=seed)
    return replace(base, **overrides)


@dataclass(frozen=True)
class DiagnosticsSnapshot:
    grid_value: float
    us_accuracy: float
    ds_accuracies: dict  # (task name, shots) -> probe accuracy at the pre-logit layer
    layer_norms: tuple  # hidden layers 1..L, then the head
    distances_to_init: tuple
    head_margin: float
    prelogit_margin: float
    error: Optional[str] = None  # set when training this grid point failed

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def head_norm(self) -> float:
        return self.layer_norms[-1] if self.layer_norms else math.nan

    @property
    def body_norm_sum(self) -> float:
        return float(sum(self.layer_norms[:-1])) if self.layer_norms else math.nan


def snapshot(model: ToyModel, task: SyntheticTask, grid_value: float, shots: Sequence[int],
             ds_tasks: Sequence[str], l2: float = DEFAULT_PROBE_L2, seed: int = 0) -> DiagnosticsSnapshot:
    """Diagnostics of a trained model. Margins are averaged over the upstream training set."""
    train = task.upstream_train
    ds = {}
    for name in ds_tasks:
        for d in shots:
            ds[(name, int(d))] = few_shot_probe(model, model.depth, task.downstream[name], int(d), l2,
                                                seed).ds_accuracy
    return DiagnosticsSnapshot(
        grid_value=float(grid_value),
        us_accuracy=model.accuracy(task.upstream_test.x, task.upstream_test.y),
        ds_accuracies=ds,
        layer_norms=tuple(layer_norms(model)),
        distances_to_init=tuple(distance_to_init(model)),
        head_margin=head_margin(model, train),
        prelogit_margin=normalized_layer_margin(model, train, model.depth),
    )


def head_hyperparam_sweep(base_spec: ToyModelSpec, task: SyntheticTask, train_opts: TrainOptions,
                          axis: str, grid: Sequence[float], shots: Sequence[int] = (10,),
                          ds_tasks: Optional[Sequence[str]] = None, l2: float = DEFAULT_PROBE_L2,
                          seed: int = 0) -> list:
    """Train one model per grid value of ``axis`` (everything else fixed) and record
    its diagnostics. A grid point whose training fails yields a flagged snapshot."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    ds_tasks = sorted(task.downstream) if ds_tasks is None else list(ds_tasks)
    init = build_model(base_spec)
    out = []
    for value in grid:
        try:
            opts = replace(train_opts, **{axis: float(value)})
            model, _ = train_upstream(init, task.upstream_train.x, task.upstream_train.y, opts)
            out.append(snapshot(model, task, value, shots, ds_tasks, l2, seed))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            out.append(DiagnosticsSnapshot(float(value), math.nan, {}, (), (), math.nan, math.nan,
                                           error=f"{type(exc).__name__}: {exc}"))
    return out


def optimal_head_wd(snapshots: Sequence[DiagnosticsSnapshot], ds_task: str, shots: int) -> float:
    """Grid value with the best DS accuracy; ties go to the smaller value. Failed points are skipped."""
    if not snapshots:
        raise ValueError("sweep is empty")
    usable = [s for s in snapshots if not s.failed and (ds_task, shots) in s.ds_accuracies]
    if not usable:
        raise ValueError(f"no successful grid point has an accuracy for {(ds_task, shots)}")
    best = max(usable, key=lambda s: (s.ds_accuracies[(ds_task, shots)], -s.grid_value))
    return best.grid_value


def sweep_csv(snapshots: Sequence[DiagnosticsSnapshot]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_CSV_COLUMNS + ("error",))

    def fmt(v):
        return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))

    for s in snapshots:
        common = [fmt(s.head_norm), fmt(s.body_norm_sum), fmt(s.head_margin), fmt(s.prelogit_margin)]
        if s.failed or not s.ds_accuracies:
            w.writerow([fmt(s.grid_value), fmt(s.us_accuracy), "", "", ""] + common + [s.error or ""])
            continue
        for (name, d), acc in sorted(s.ds_accuracies.items()):
            w.writerow([fmt(s.grid_value), fmt(s.us_accuracy), name, d, fmt(acc)] + common + [""])
    return buf.getvalue()


@dataclass(frozen=True)
class WdCorrelationRow:
    """Report row relating the optimal head WD of a DS task to how well its probe
    accuracy tracks US accuracy across the sweep."""

    ds_task: str
    shots: int
    optimal_wd: float
    us_ds_rank_correlation: float  # NaN when undefined


def wd_vs_rank_correlation(snapshots: Sequence[DiagnosticsSnapshot], shots: int) -> list:
    """Report only: no ordering between the two columns is asserted."""
    ok = [s for s in snapshots if not s.failed]
    names = sorted({name for s in ok for (name, d) in s.ds_accuracies if d == shots})
    rows = []
    for name in names:
        pts = [(s.us_accuracy, s.ds_accuracies[(name, shots)]) for s in ok if (name, shots) in s.ds_accuracies]
        try:
            rho = spearman([p[0] for p in pts], [p[1] for p in pts])
        except (UndefinedCorrelationError, ValueError):
            rho = math.nan
        rows.append(WdCorrelationRow(name, shots, optimal_head_wd(ok, name, shots), rho))
    return rows


def _batched_logits_from(model: ToyModel, i: int, z: np.ndarray) -> np.ndarray:
    """Logits for a stack of layer-i pre-activations z of shape (P, n, d_i)."""
    for j in range(i + 1, len(model.weights)):
        z = _act(z, model.spec.activation) @ model.weights[j] + model.biases[j]
    return z


def _loss_difference(plus: np.ndarray, minus: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean cross-entropy at ``plus`` minus that at ``minus`` (logit stacks of shape
    (P, n, C)), computed from the logit differences so that tiny changes are not
    lost to rounding of the two loss values:
    lse(s + d) - lse(s) = log1p(sum_j softmax(s)_j * expm1(d_j))."""
    d = plus - minus
    shifted = minus - minus.max(axis=2, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=2, keepdims=True)
    n = y.shape[0]
    per_example = np.log1p(np.sum(p * np.expm1(d), axis=2)) - d[:, np.arange(n), y]
    return per_example.mean(axis=1)


def finite_difference_gradients(model: ToyModel, x: np.ndarray, y: np.ndarray, step: float = 1e-5,
                                chunk: int = 512) -> list:
    """Per layer (hidden layers, then the head): (backprop gradient, central finite
    difference) of the mean cross-entropy, each flattened as [W.ravel(), b].

    Perturbing W_i[a, b] (or b_i[b]) only moves column b of the layer-i
    pre-activation, so all perturbations of one layer are pushed through the
    remaining layers as a batch. With relu, a pre-activation within ``step * |h|``
    of 0 is a kink where the two-sided difference legitimately disagrees with the
    (sub)gradient.
    """
    zs, hs, logits = model.forward(x)
    zs = zs + [logits]
    _, gw, gb = model.loss_and_grads(x, y)
    out = []
    for i, (w, g_w, g_b) in enumerate(zip(model.weights, gw, gb)):
        fan_in, fan_out = w.shape
        # (input column, output unit) for weights, then (None, unit) for biases
        cols = [hs[i][:, a] for a in range(fan_in) for _ in range(fan_out)] + [np.ones(x.shape[0])] * fan_out
        units = [b for _ in range(fan_in) for b in range(fan_out)] + list(range(fan_out))
        fd = np.empty(len(units))
        for start in range(0, len(units), chunk):
            sl = slice(start, start + chunk)
            u = np.asarray(units[sl])
            c = np.stack(cols[sl])  # (P, n)
            base = np.broadcast_to(zs[i], (len(u),) + zs[i].shape).copy()
            rows = np.arange(len(u))
            logits = []
            for sgn in (1.0, -1.0):
                z = base.copy()
                z[rows, :, u] += sgn * step * c
                logits.append(_batched_logits_from(model, i, z))
            fd[sl] = _loss_difference(logits[0], logits[1], y) / (2 * step)
        out.append((np.concatenate([g_w.reshape(-1), g_b]), fd))
    return out


def gradient_check(model: ToyModel, x: np.ndarray, y: np.ndarray, step: float = 1e-5,
                   floor: float = 1e-6, chunk: int = 512) -> float:
    """Largest elementwise relative error between backprop gradients and central finite
    differences, |g - g_fd| / max(|g| + |g_fd|, floor), over all parameters."""
    worst = 0.0
    for analytic, fd in finite_difference_gradients(model, x, y, step, chunk):
        rel = np.abs(analytic - fd) / np.maximum(np.abs(analytic) + np.abs(fd), floor)
        worst = max(worst, float(rel.max()))
    return worst
