"""Synthetic experiment clouds with a known generating curve, and outcome tables
with exact per-classifier accuracies."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .frontier import OutcomeTable
from .powerlaw import PowerLawFit, eval_power_law
from .records import ExperimentRecord


@dataclass(frozen=True)
class NoNoise:
    pass


@dataclass(frozen=True)
class OneSidedBelow:
    """Nonnegative exponential deviation with mean ``scale``, subtracted from DS accuracy."""

    scale: float

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("scale must be >= 0")


@dataclass(frozen=True)
class Symmetric:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class ConcentratedHighUS:
    """Draw u = U ** (1 / exponent) on the unit interval, i.e. density ~ u ** (exponent - 1)."""

    exponent: float

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("exponent must be positive")


NoiseModel = Union[NoNoise, OneSidedBelow, Symmetric]
DensityBias = Union[Uniform, ConcentratedHighUS]


@dataclass(frozen=True)
class GeneratorSpec:
    true_fit: PowerLawFit
    n_points: int
    us_range: tuple = (0.05, 0.45)
    noise: NoiseModel = NoNoise()
    density: DensityBias = Uniform()
    seed: int = 0
    upstream_task: str = "synthetic_us"
    downstream_task: str = "synthetic_ds"
    shots: int = 25
    arch_family: str = "synthetic"
    id_prefix: str = "sim"

    def __post_init__(self):
        lo, hi = self.us_range
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"us_range must satisfy 0 < lo < hi < 1, got {self.us_range}")
        if self.n_points < 0:
            raise ValueError("n_points must be nonnegative")


def true_ds_accuracy(fit: PowerLawFit, us: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - eval_power_law(fit, 1.0 - np.asarray(us, dtype=float)), 0.0, 1.0)


def generate_cloud(spec: GeneratorSpec) -> list[ExperimentRecord]:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    lo, hi = spec.us_range
    u = rng.random(n)
    if isinstance(spec.density, ConcentratedHighUS):
        u = u ** (1.0 / spec.density.exponent)
    us = lo + (hi - lo) * u
    ds = np.atleast_1d(true_ds_accuracy(spec.true_fit, us))
    if isinstance(spec.noise, OneSidedBelow):
        ds = ds - rng.exponential(spec.noise.scale, n) if spec.noise.scale > 0 else ds
    elif isinstance(spec.noise, Symmetric):
        ds = ds + rng.normal(0.0, spec.noise.sigma, n) if spec.noise.sigma > 0 else ds
    ds = np.clip(ds, 0.0, 1.0)
    width = max(5, len(str(max(n - 1, 0))))
    return [
        ExperimentRecord(
            experiment_id=f"{spec.id_prefix}-{i:0{width}d}",
            arch_family=spec.arch_family,
            upstream_task=spec.upstream_task,
            downstream_task=spec.downstream_task,
            shots=spec.shots,
            upstream_accuracy=float(us[i]),
            downstream_accuracy=float(ds[i]),
        )
        for i in range(n)
    ]


def correct_count(accuracy: float, n: int) -> int:
    """Number of correct entries for a column of length n.

    n * accuracy is snapped to the nearest integer when within 1e-9 of it
    (absorbs float noise such as 0.333 * 1000); otherwise it is floored and the
    fractional remainder rounds up when it is at least one half.
    """
    x = accuracy * n
    nearest = round(x)
    if abs(x - nearest) <= 1e-9:
        return int(nearest)
    base = math.floor(x)
    return int(base + (1 if x - base >= 0.5 else 0))


def generate_outcome_table(accuracies: Sequence[tuple], n_us: int, n_ds: int, seed: int = 0,
                           ids: Sequence[str] = ()) -> OutcomeTable:
    """Boolean correctness columns with exactly ``correct_count`` true entries each,
    rows shuffled independently per column."""
    for a in accuracies:
        if not (0.0 <= a[0] <= 1.0 and 0.0 <= a[1] <= 1.0):
            raise ValueError(f"accuracy pair {a} outside [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(accuracies)
    up = np.zeros((n_us, n), dtype=bool)
    dn = np.zeros((n_ds, n), dtype=bool)
    for j, (a_us, a_ds) in enumerate(accuracies):
        col = np.zeros(n_us, dtype=bool)
        col[: correct_count(a_us, n_us)] = True
        up[:, j] = rng.permutation(col)
        col = np.zeros(n_ds, dtype=bool)
        col[: correct_count(a_ds, n_ds)] = True
        dn[:, j] = rng.permutation(col)
    return OutcomeTable(up, dn, tuple(ids))
