"""Upper convex hull of (upstream, downstream) accuracy clouds and the randomized
classifiers that realize points on it."""
from __future__ import annotations

import csv
import io
import json
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .records import ExperimentRecord

WEIGHT_SUM_TOL = 1e-12


class FrontierError(ValueError):
    pass


class MixtureError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracyPoint:
    us: float
    ds: float
    source_id: str = ""

    def __post_init__(self):
        if not (0.0 <= self.us <= 1.0 and 0.0 <= self.ds <= 1.0):
            raise ValueError(f"accuracy point ({self.us}, {self.ds}) outside [0, 1]^2")


def points_from_records(records: Iterable[ExperimentRecord]) -> list[AccuracyPoint]:
    return [AccuracyPoint(r.upstream_accuracy, r.downstream_accuracy, r.experiment_id) for r in records]


@dataclass(frozen=True)
class Frontier:
    vertices: tuple

    def __len__(self):
        return len(self.vertices)

    @property
    def us(self) -> np.ndarray:
        return np.array([v.us for v in self.vertices])

    @property
    def ds(self) -> np.ndarray:
        return np.array([v.ds for v in self.vertices])

    def interpolate(self, us: float) -> float:
        """Piecewise-linear frontier height at ``us`` (must lie in the vertex range)."""
        xs = [v.us for v in self.vertices]
        if not xs[0] <= us <= xs[-1]:
            raise FrontierError(f"us={us} outside frontier range [{xs[0]}, {xs[-1]}]")
        i = bisect_left(xs, us)
        if xs[i] == us:
            return self.vertices[i].ds
        a, b = self.vertices[i - 1], self.vertices[i]
        t = (us - a.us) / (b.us - a.us)
        return a.ds + t * (b.ds - a.ds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["us", "ds", "source_id"])
        for v in self.vertices:
            w.writerow([repr(v.us), repr(v.ds), v.source_id])
        return buf.getvalue()


def _cross(o: AccuracyPoint, a: AccuracyPoint, b: AccuracyPoint) -> float:
    return (a.us - o.us) * (b.ds - o.ds) - (a.ds - o.ds) * (b.us - o.us)


def _dedupe_us(points: Sequence[AccuracyPoint]) -> list[AccuracyPoint]:
    # sorted by us ascending; per us keep max ds, ties -> smallest source_id
    ordered = sorted(points, key=lambda p: (p.us, -p.ds, p.source_id))
    out = []
    for p in ordered:
        if out and out[-1].us == p.us:
            continue
        out.append(p)
    return out


def upper_hull(points: Sequence[AccuracyPoint]) -> Frontier:
    """Monotone-chain upper hull, left to right. Collinear interior points are dropped."""
    if not points:
        raise FrontierError("upper_hull needs at least one point")
    hull: list[AccuracyPoint] = []
    for p in _dedupe_us(points):
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) >= 0:
            hull.pop()
        hull.append(p)
    return Frontier(tuple(hull))


def ascending_part(frontier: Frontier) -> Frontier:
    """Vertices from the leftmost one up to the highest-DS vertex.

    Past the DS peak the hull only descends toward the max-US point; a
    monotone increasing curve cannot follow that tail.
    """
    vs = frontier.vertices
    peak = max(range(len(vs)), key=lambda i: (vs[i].ds, -i))
    return Frontier(vs[: peak + 1])


def hull_vertices_bruteforce(points: Sequence[AccuracyPoint]) -> list[AccuracyPoint]:
    """O(n^3) chord-dominance reference: a point survives unless some chord between
    two points strictly left and right of it passes on or above it."""
    cand = _dedupe_us(points)
    out = []
    for q in cand:
        dominated = False
        for a in cand:
            if a.us >= q.us:
                continue
            for b in cand:
                if b.us <= q.us:
                    continue
                # q on or below chord a-b  <=>  cross(a, b, q) <= 0
                if _cross(a, b, q) <= 0:
                    dominated = True
                    break
            if dominated:
                break
        if not dominated:
            out.append(q)
    return out


# --- mixtures ----------------------------------------------------------------

@dataclass(frozen=True)
class Mixture:
    weights: tuple  # of (source_id, probability)

    def __post_init__(self):
        if not self.weights:
            raise MixtureError("empty mixture")
        ids = [w[0] for w in self.weights]
        if len(set(ids)) != len(ids):
            raise MixtureError("duplicate ids in mixture")
        ps = [w[1] for w in self.weights]
        if any(p < 0 or not math.isfinite(p) for p in ps):
            raise MixtureError("mixture probabilities must be finite and nonnegative")
        total = math.fsum(ps)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise MixtureError(f"mixture weights sum to {total!r}, not 1")

    @classmethod
    def of(cls, mapping) -> "Mixture":
        items = mapping.items() if hasattr(mapping, "items") else mapping
        return cls(tuple((str(k), float(v)) for k, v in items))

    @property
    def ids(self) -> list[str]:
        return [w[0] for w in self.weights]

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([w[1] for w in self.weights], dtype=float)

    def to_json(self) -> str:
        return json.dumps([[i, p] for i, p in self.weights])


def mix_accuracies(points: Sequence[AccuracyPoint], mixture: Mixture) -> AccuracyPoint:
    by_id = {p.source_id: p for p in points}
    missing = [i for i in mixture.ids if i not in by_id]
    if missing:
        raise MixtureError(f"unknown ids in mixture: {missing}")
    us = math.fsum(p * by_id[i].us for i, p in mixture.weights)
    ds = math.fsum(p * by_id[i].ds for i, p in mixture.weights)
    # convex combinations of [0,1] values can overshoot by an ulp
    return AccuracyPoint(min(max(us, 0.0), 1.0), min(max(ds, 0.0), 1.0), "mixture")


def mixture_for_target_us(frontier: Frontier, target_us: float) -> Mixture:
    """Mixture of at most two adjacent vertices whose upstream accuracy is ``target_us``."""
    vs = frontier.vertices
    xs = [v.us for v in vs]
    if not xs[0] <= target_us <= xs[-1]:
        raise FrontierError(f"target us={target_us} outside frontier range [{xs[0]}, {xs[-1]}]")
    i = bisect_left(xs, target_us)
    if xs[i] == target_us:
        return Mixture(((vs[i].source_id, 1.0),))
    a, b = vs[i - 1], vs[i]
    w_b = (target_us - a.us) / (b.us - a.us)
    return Mixture(((a.source_id, 1.0 - w_b), (b.source_id, w_b)))


# --- randomized-classifier mixtures over outcome tables ---------------------

@dataclass(frozen=True)
class OutcomeTable:
    """Per-example correctness of N classifiers; column j belongs to ``ids[j]``."""

    upstream: np.ndarray  # bool, n_us x N
    downstream: np.ndarray  # bool, n_ds x N
    ids: tuple = field(default=())

    def __post_init__(self):
        up = np.asarray(self.upstream, dtype=bool)
        dn = np.asarray(self.downstream, dtype=bool)
        if up.ndim != 2 or dn.ndim != 2 or up.shape[1] != dn.shape[1]:
            raise ValueError("outcome matrices must be 2-D with equal column counts")
        object.__setattr__(self, "upstream", up)
        object.__setattr__(self, "downstream", dn)
        ids = tuple(self.ids) if self.ids else tuple(str(j) for j in range(up.shape[1]))
        if len(ids) != up.shape[1]:
            raise ValueError("ids length must equal the number of classifiers")
        object.__setattr__(self, "ids", ids)

    @property
    def n_classifiers(self) -> int:
        return self.upstream.shape[1]

    def accuracies(self) -> list[AccuracyPoint]:
        us = self.upstream.mean(axis=0) if self.upstream.shape[0] else np.zeros(self.n_classifiers)
        ds = self.downstream.mean(axis=0) if self.downstream.shape[0] else np.zeros(self.n_classifiers)
        return [AccuracyPoint(float(u), float(d), i) for u, d, i in zip(us, ds, self.ids)]

    def column_indices(self, mixture: Mixture) -> np.ndarray:
        index = {i: j for j, i in enumerate(self.ids)}
        try:
            return np.array([index[i] for i in mixture.ids], dtype=int)
        except KeyError as exc:
            raise MixtureError(f"mixture id {exc.args[0]!r} not a table column") from None


def expected_randomized_accuracy(table: OutcomeTable, mixture: Mixture) -> AccuracyPoint:
    """Exact accuracy of the randomized classifier: average over examples of the
    probability that the sampled model is correct."""
    cols = table.column_indices(mixture)
    p = mixture.probabilities
    us = float(np.mean(table.upstream[:, cols].astype(float) @ p))
    ds = float(np.mean(table.downstream[:, cols].astype(float) @ p))
    return AccuracyPoint(min(us, 1.0), min(ds, 1.0), "expected")


def simulate_randomized_classifier(table: OutcomeTable, mixture: Mixture, seed: int) -> AccuracyPoint:
    """Draw one model per example (independently for the upstream and downstream
    evaluation sets) and score the drawn model's prediction."""
    n_us, n_ds = table.upstream.shape[0], table.downstream.shape[0]
    if n_us == 0 or n_ds == 0:
        raise ValueError("empty outcome table")
    cols = table.column_indices(mixture)
    p = mixture.probabilities
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    pick_us = cols[rng.choice(len(cols), size=n_us, p=p)]
    pick_ds = cols[rng.choice(len(cols), size=n_ds, p=p)]
    us = table.upstream[np.arange(n_us), pick_us].mean()
    ds = table.downstream[np.arange(n_ds), pick_ds].mean()
    return AccuracyPoint(float(us), float(ds), "simulated")
