"""Synthetic upstream/downstream tasks built from Gaussian clusters.

Inputs are ``[coarse block | fine block]``. Every example carries

* a class label ``c`` (the upstream label). Class c owns a random direction
  ``mu_c`` in the fine block and each example sits at ``+mu_c`` or ``-mu_c``
  (two antipodal modes), so class centroids coincide at the origin and no
  linear read-out of the raw input separates the classes;
* a coarse latent ``z``, independent of ``c``, that shifts the coarse block.

Downstream kinds reuse the generator: ``aligned`` predicts c on fresh draws,
``lowlevel`` predicts z (a feature the upstream task never needs), and
``shifted`` predicts c with the fine-block cluster means translated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DS_KINDS = ("aligned", "lowlevel", "shifted")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Defaults are the reference configuration used by the mechanism checks."""

    num_classes: int = 10
    coarse_dim: int = 4
    fine_dim: int = 12
    num_coarse: int = 2
    class_sep: float = 3.0
    mode_offset: float = 0.5  # class centroid length, as a fraction of class_sep
    coarse_sep: float = 6.0
    noise: float = 0.5
    shift: float = 1.0
    n_upstream: int = 2000
    n_upstream_test: int = 1000
    n_downstream_pool: int = 100  # per class, probe training pool
    n_downstream_eval: int = 100  # per class
    seed: int = 0

    def __post_init__(self):
        if self.num_coarse > self.coarse_dim:
            raise ValueError("num_coarse cannot exceed coarse_dim")
        if min(self.num_classes, self.num_coarse) < 2:
            raise ValueError("need at least two classes and two coarse latents")

    @property
    def input_dim(self) -> int:
        return self.coarse_dim + self.fine_dim


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0


@dataclass(frozen=True)
class DownstreamTask:
    name: str
    kind: str
    train: LabeledSet  # probe training pool
    eval: LabeledSet
    num_classes: int


@dataclass(frozen=True)
class SyntheticTask:
    spec: SyntheticTaskSpec
    upstream_train: LabeledSet
    upstream_test: LabeledSet
    downstream: dict  # name -> DownstreamTask


class _Generator:
    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        dirs = rng.standard_normal((spec.num_classes, spec.fine_dim))
        self.class_means = spec.class_sep * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        odirs = rng.standard_normal((spec.num_classes, spec.fine_dim))
        self.class_centroids = (spec.mode_offset * spec.class_sep) * odirs / np.linalg.norm(
            odirs, axis=1, keepdims=True)
        # coarse latent z sits on coordinate axis z of the coarse block
        self.coarse_means = spec.coarse_sep * np.eye(spec.num_coarse, spec.coarse_dim)
        sdir = rng.standard_normal(spec.fine_dim)
        self.shift_vec = spec.shift * sdir / np.linalg.norm(sdir)

    def draw(self, rng, classes: np.ndarray, latents: np.ndarray, shifted: bool = False) -> np.ndarray:
        s = self.spec
        n = classes.shape[0]
        sign = rng.choice([-1.0, 1.0], size=n)
        fine = (self.class_centroids[classes] + sign[:, None] * self.class_means[classes]
                + s.noise * rng.standard_normal((n, s.fine_dim)))
        if shifted:
            fine = fine + self.shift_vec
        coarse = self.coarse_means[latents] + s.noise * rng.standard_normal((n, s.coarse_dim))
        return np.hstack([coarse, fine])

    def upstream(self, rng, n: int) -> LabeledSet:
        c = rng.integers(0, self.spec.num_classes, n)
        z = rng.integers(0, self.spec.num_coarse, n)
        return LabeledSet(self.draw(rng, c, z), c)

    def balanced(self, rng, per_class: int, kind: str) -> LabeledSet:
        s = self.spec
        if kind == "lowlevel":
            z = np.repeat(np.arange(s.num_coarse), per_class)
            c = rng.integers(0, s.num_classes, z.shape[0])
            return LabeledSet(self.draw(rng, c, z), z)
        c = np.repeat(np.arange(s.num_classes), per_class)
        z = rng.integers(0, s.num_coarse, c.shape[0])
        return LabeledSet(self.draw(rng, c, z, shifted=(kind == "shifted")), c)


def make_task(spec: SyntheticTaskSpec = SyntheticTaskSpec(), kinds=DS_KINDS) -> SyntheticTask:
    gen = _Generator(spec)
    rng = np.random.default_rng([spec.seed, 1])
    us_train = gen.upstream(rng, spec.n_upstream)
    us_test = gen.upstream(rng, spec.n_upstream_test)
    downstream = {}
    for kind in kinds:
        if kind not in DS_KINDS:
            raise ValueError(f"unknown downstream kind {kind!r}")
        train = gen.balanced(rng, spec.n_downstream_pool, kind)
        ev = gen.balanced(rng, spec.n_downstream_eval, kind)
        n_cls = spec.num_coarse if kind == "lowlevel" else spec.num_classes
        downstream[kind] = DownstreamTask(kind, kind, train, ev, n_cls)
    return SyntheticTask(spec, us_train, us_test, downstream)
