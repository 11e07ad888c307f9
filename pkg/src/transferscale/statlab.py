"""Rank statistics across tasks: Spearman matrices, parameter-vs-shots trends and
sign summaries."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .powerlaw import PowerLawFit
from .records import ExperimentRecord

PARAMETERS = ("k", "alpha", "e_ir")
MODEL_KEY = "model_id"


class UndefinedCorrelationError(ValueError):
    pass


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    return _pearson(x, y)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of mid-ranks (ties get their average rank)."""
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def spearman_bruteforce(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Reference implementation: explicit mid-ranks by pairwise counting, then the
    textbook covariance formula."""
    def midranks(v):
        return [sum(1 for w in v if w < a) + (sum(1 for w in v if w == a) + 1) / 2 for a in v]

    rx, ry = midranks(list(xs)), midranks(list(ys))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        raise UndefinedCorrelationError("constant sequence")
    return cov / math.sqrt(vx * vy)


# --- task correlation matrix ---------------------------------------------------

@dataclass(frozen=True)
class CorrelationMatrix:
    labels: tuple
    values: np.ndarray  # NaN marks a missing pair

    def get(self, a: str, b: str) -> Optional[float]:
        v = self.values[self.labels.index(a), self.labels.index(b)]
        return None if math.isnan(v) else float(v)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task"] + list(self.labels))
        for name, row in zip(self.labels, self.values):
            w.writerow([name] + ["" if math.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()


def model_key(rec: ExperimentRecord) -> str:
    """Key identifying the pretrained model behind a record.

    experiment_id is unique per row, so a model evaluated on several tasks
    carries a shared ``model_id`` hyperparameter; rows without it stand alone.
    """
    return rec.hyperparams.get(MODEL_KEY, rec.experiment_id)


def task_accuracies(records: Sequence[ExperimentRecord], shots: Optional[int], upstream_task: str,
                    task: str) -> dict:
    """model key -> accuracy for one task label. The upstream task's own label
    yields upstream accuracies."""
    out = {}
    for r in records:
        if r.upstream_task != upstream_task:
            continue
        if task == upstream_task:
            out.setdefault(model_key(r), r.upstream_accuracy)
        elif r.downstream_task == task and (shots is None or r.shots == shots):
            out[model_key(r)] = r.downstream_accuracy
    return out


def task_correlation_matrix(records: Sequence[ExperimentRecord], shots: Optional[int], upstream_task: str,
                            task_list: Sequence[str]) -> CorrelationMatrix:
    cols = [task_accuracies(records, shots, upstream_task, t) for t in task_list]
    n = len(task_list)
    values = np.full((n, n), np.nan)
    for i in range(n):
        values[i, i] = 1.0
        for j in range(i + 1, n):
            shared = sorted(set(cols[i]) & set(cols[j]))
            if len(shared) < 2:
                continue
            try:
                rho = spearman([cols[i][m] for m in shared], [cols[j][m] for m in shared])
            except UndefinedCorrelationError:
                continue
            values[i, j] = values[j, i] = rho
    return CorrelationMatrix(tuple(task_list), values)


# --- parameter trends --------------------------------------------------------

@dataclass(frozen=True)
class ParamTrendRow:
    downstream_task: str
    upstream_task: str
    parameter: str
    correlation_with_shots: float  # NaN when undefined

    @property
    def defined(self) -> bool:
        return not math.isnan(self.correlation_with_shots)


def params_vs_shots(fits: Mapping[int, PowerLawFit], method: str = "pearson",
                    downstream_task: str = "", upstream_task: str = "") -> list[ParamTrendRow]:
    if len(fits) < 2:
        raise ValueError("need fits for at least two shot counts")
    corr = {"pearson": pearson, "spearman": spearman}[method.lower()]
    shots = sorted(fits)
    rows = []
    for name in PARAMETERS:
        vals = [getattr(fits[s], name) for s in shots]
        try:
            c = corr(shots, vals)
        except UndefinedCorrelationError:
            c = math.nan
        rows.append(ParamTrendRow(downstream_task, upstream_task, name, c))
    return rows


def trend_rows_csv(rows: Sequence[ParamTrendRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["DS", "US", "Parameter", "Correlation"])
    for r in rows:
        w.writerow([r.downstream_task, r.upstream_task, r.parameter,
                    "" if not r.defined else repr(r.correlation_with_shots)])
    return buf.getvalue()


def sign_likelihood(rows: Sequence[ParamTrendRow]) -> dict:
    """Mean sign of the shots correlation per parameter across DS tasks.

    +1: every task increases with shots, -1: every task decreases. Undefined
    correlations are skipped; a parameter with none left maps to NaN.
    """
    if not rows:
        raise ValueError("sign_likelihood needs at least one row")
    out = {}
    for name in PARAMETERS:
        signs = [math.copysign(1.0, r.correlation_with_shots) if r.correlation_with_shots != 0 else 0.0
                 for r in rows if r.parameter == name and r.defined]
        out[name] = float(np.mean(signs)) if signs else math.nan
    return out


def us_ds_rank_correlation(checkpoint_series: Sequence[tuple]) -> float:
    if len(checkpoint_series) < 2:
        raise ValueError("need at least two checkpoints")
    us = [c[0] for c in checkpoint_series]
    ds = [c[1] for c in checkpoint_series]
    return spearman(us, ds)
