"""Saturating power law between upstream and downstream error,

    e_ds = k * (e_us - e_bayes) ** alpha + e_ir,

with fitting on all points or on the upper hull, holdout diagnostics and
sample-size sensitivity sweeps.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .frontier import AccuracyPoint, ascending_part, upper_hull


class PowerLawError(ValueError):
    pass


class DomainError(PowerLawError):
    pass


class InsufficientDataError(PowerLawError):
    pass


class RankError(PowerLawError):
    pass


class FitConvergenceError(PowerLawError):
    def __init__(self, message: str, best: "PowerLawFit"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PowerLawFit:
    k: float
    alpha: float
    e_ir: float
    bayes_error_us: float = 0.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.e_ir < 1.0:
            raise ValueError(f"e_ir must lie in [0, 1), got {self.e_ir}")
        if not 0.0 <= self.bayes_error_us < 1.0:
            raise ValueError(f"bayes_error_us must lie in [0, 1), got {self.bayes_error_us}")

    @property
    def bounded(self) -> bool:
        """True when the predicted error at e_us = 1 does not exceed 1."""
        return self.e_ir + self.k * (1.0 - self.bayes_error_us) ** self.alpha <= 1.0 + 1e-9


class FitTarget(enum.Enum):
    ALL_POINTS = "all"
    HULL_VERTICES = "hull"


@dataclass(frozen=True)
class AbsoluteUS:
    """Fit on us <= lo, hold out lo < us <= hi."""

    lo: float = 0.45
    hi: float = 0.50

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"AbsoluteUS needs lo < hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class TopQuantile:
    """Hold out the top ``q`` fraction of points by upstream accuracy."""

    q: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"TopQuantile needs 0 <= q < 1, got {self.q}")


HoldoutPolicy = Union[AbsoluteUS, TopQuantile]
DEFAULT_POLICY = AbsoluteUS(0.45, 0.50)


@dataclass(frozen=True)
class FitOptions:
    grid_step: float = 1e-3
    max_iter: int = 10_000
    loss_tol: float = 1e-12
    param_tol: float = 1e-10
    error_metric: str = "mae"  # mae | rmse | rss


@dataclass(frozen=True)
class FitDiagnostics:
    fitting_error: float
    prediction_error: float  # NaN when there is no holdout set
    residual_std: float
    residual_rss_root: float
    n_fit: int
    n_holdout: int
    loss: float = 0.0
    iterations: int = 0


@dataclass(frozen=True)
class SensitivityRow:
    sample_size: int
    mean_fitting_error: float
    std_fitting_error: float
    mean_prediction_error: float
    std_prediction_error: float
    n_trials: int
    n_failed: int = 0


# --- evaluation ----------------------------------------------------------------

def bayes_adjusted_error(e_us: float, e_bayes: float) -> float:
    if e_bayes > e_us:
        raise DomainError(f"Bayes error {e_bayes} exceeds upstream error {e_us}")
    if e_bayes < 0 or e_us > 1:
        raise DomainError(f"need 0 <= e_bayes <= e_us <= 1, got ({e_bayes}, {e_us})")
    return e_us - e_bayes


def eval_power_law(fit: PowerLawFit, e_us):
    """Predicted downstream error. Accepts scalars or arrays.

    Not clamped: the model value is strictly increasing in e_us. Use
    ``predict_ds_accuracy`` for a value confined to [0, 1].
    """
    x = np.asarray(e_us, dtype=float) - fit.bayes_error_us
    if np.any(x < 0):
        raise DomainError("e_us below the upstream Bayes error")
    out = fit.k * np.power(x, fit.alpha) + fit.e_ir
    return float(out) if out.ndim == 0 else out


def predict_ds_accuracy(fit: PowerLawFit, us_accuracy):
    acc = 1.0 - np.clip(eval_power_law(fit, 1.0 - np.asarray(us_accuracy, dtype=float)), 0.0, 1.0)
    return float(acc) if np.ndim(acc) == 0 else acc


def saturation_value(fit: PowerLawFit) -> float:
    return 1.0 - fit.e_ir


def curve_csv(fit: PowerLawFit, us_grid: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["us", "predicted_ds"])
    for u in us_grid:
        if 1.0 - u < fit.bayes_error_us:
            continue
        w.writerow([repr(float(u)), repr(float(predict_ds_accuracy(fit, u)))])
    return buf.getvalue()


# --- holdout -------------------------------------------------------------------

def _sorted_points(points: Sequence[AccuracyPoint]) -> list[AccuracyPoint]:
    return sorted(points, key=lambda p: (p.us, p.ds, p.source_id))


def split_holdout(points: Sequence[AccuracyPoint], policy: HoldoutPolicy):
    if not points:
        raise InsufficientDataError("no points to split")
    ordered = _sorted_points(points)
    if isinstance(policy, AbsoluteUS):
        fit_set = [p for p in ordered if p.us <= policy.lo]
        holdout = [p for p in ordered if policy.lo < p.us <= policy.hi]
    elif isinstance(policy, TopQuantile):
        m = int(math.floor(policy.q * len(ordered) + 1e-9))
        fit_set, holdout = ordered[: len(ordered) - m], ordered[len(ordered) - m:]
    else:
        raise TypeError(f"unknown holdout policy {policy!r}")
    if len(fit_set) < 3:
        raise InsufficientDataError(f"fit set has {len(fit_set)} points, need at least 3")
    return fit_set, holdout


# --- error metrics -------------------------------------------------------------

def _residuals(fit: PowerLawFit, points: Sequence[AccuracyPoint]) -> np.ndarray:
    us = np.array([p.us for p in points])
    ds = np.array([p.ds for p in points])
    return predict_ds_accuracy(fit, us) - ds


def _summarize(res: np.ndarray, metric: str) -> float:
    if metric == "mae":
        return float(np.mean(np.abs(res)))
    if metric == "rmse":
        return float(np.sqrt(np.mean(res**2)))
    if metric == "rss":
        return float(np.sqrt(np.sum(res**2)))
    raise ValueError(f"unknown error metric {metric!r}")


def fitting_error(fit: PowerLawFit, fit_points: Sequence[AccuracyPoint], metric: str = "mae") -> float:
    """Mean absolute DS-accuracy residual over the points used for fitting."""
    if not fit_points:
        raise InsufficientDataError("fitting_error needs at least one point")
    return _summarize(_residuals(fit, fit_points), metric)


def prediction_error(fit: PowerLawFit, holdout_points: Sequence[AccuracyPoint],
                     target: FitTarget = FitTarget.ALL_POINTS, metric: str = "mae") -> float:
    """Residual size on held-out points; a hull fit is compared with the hull of the holdout."""
    if not holdout_points:
        raise InsufficientDataError("prediction_error needs a nonempty holdout set")
    pts = fit_points_for_target(holdout_points, target)
    return _summarize(_residuals(fit, pts), metric)


def residual_std(fit: PowerLawFit, points: Sequence[AccuracyPoint]) -> tuple[float, float]:
    """(population std of residuals, root of the residual sum of squares)."""
    if len(points) < 2:
        raise InsufficientDataError("residual_std needs at least two points")
    res = _residuals(fit, points)
    return float(np.std(res)), float(np.sqrt(np.sum(res**2)))


# --- fitting -------------------------------------------------------------------

def _loss(e_us: np.ndarray, e_ds: np.ndarray, log_k: float, alpha: float, e_ir: float) -> float:
    r = np.exp(log_k) * np.power(e_us, alpha) + e_ir - e_ds
    return float(np.dot(r, r))


def _grid_start(x: np.ndarray, y: np.ndarray, step: float):
    """Scan e_ir on a grid; each candidate gets a closed-form log-log regression.
    Returns (loss, log_k, alpha, e_ir) of the best candidate."""
    upper = float(y.min()) - 1e-6
    n_grid = int(math.floor(upper / step + 1e-9)) + 1 if upper >= 0 else 1
    grid = np.arange(n_grid) * step
    best = None
    pos = x > 0
    lx_all = np.log(np.where(pos, x, 1.0))
    for e_ir in grid:
        m = pos & (y > e_ir)
        if np.count_nonzero(m) < 2:
            continue
        lx = lx_all[m]
        ly = np.log(y[m] - e_ir)
        lxc = lx - lx.mean()
        sxx = float(np.dot(lxc, lxc))
        if sxx == 0.0:
            continue
        alpha = float(np.dot(lxc, ly - ly.mean()) / sxx)
        if not alpha > 0:
            continue
        log_k = float(ly.mean() - alpha * lx.mean())
        loss = _loss(x, y, log_k, alpha, float(e_ir))
        if best is None or loss < best[0]:
            best = (loss, log_k, alpha, float(e_ir))
    return best


def _fit_error_space(x: np.ndarray, y: np.ndarray, bayes: float, options: FitOptions):
    start = _grid_start(x, y, options.grid_step)
    if start is None:
        raise RankError("no grid candidate admits a log-log regression")
    _, log_k0, alpha0, e_ir0 = start

    def objective(theta):
        return _loss(x, y, theta[0], theta[1], theta[2])

    res = minimize(
        objective,
        np.array([log_k0, alpha0, e_ir0]),
        method="Nelder-Mead",
        bounds=[(-50.0, 10.0), (1e-9, 50.0), (0.0, 1.0 - 1e-12)],
        options={"maxiter": options.max_iter, "xatol": options.param_tol,
                 "fatol": options.loss_tol, "disp": False},
    )
    log_k, alpha, e_ir = (float(v) for v in res.x)
    fit = PowerLawFit(k=math.exp(log_k), alpha=alpha, e_ir=e_ir, bayes_error_us=bayes)
    if not res.success:
        raise FitConvergenceError(f"simplex refinement did not converge: {res.message}", fit)
    return fit, float(res.fun), int(res.nit)


def fit_points_for_target(points: Sequence[AccuracyPoint], target: FitTarget) -> list[AccuracyPoint]:
    """Hull target: the non-decreasing prefix of the upper hull."""
    if target is FitTarget.HULL_VERTICES:
        return list(ascending_part(upper_hull(points)).vertices)
    return _sorted_points(points)


def fit_curve(points: Sequence[AccuracyPoint], bayes_error_us: float = 0.0,
              options: FitOptions = FitOptions()):
    """Least-squares fit (in error space) to exactly the given points.

    Returns (fit, loss, iterations).
    """
    pts = _sorted_points(points)
    if len(pts) < 3:
        raise InsufficientDataError(f"need at least 3 points to fit, got {len(pts)}")
    if len({p.us for p in pts}) < 3:
        raise RankError("need at least 3 distinct upstream accuracies")
    e_us = 1.0 - np.array([p.us for p in pts])
    e_ds = 1.0 - np.array([p.ds for p in pts])
    if np.any(e_us < bayes_error_us):
        raise DomainError("a point has upstream error below the Bayes error")
    return _fit_error_space(e_us - bayes_error_us, e_ds, bayes_error_us, options)


def fit_power_law(points: Sequence[AccuracyPoint], target: FitTarget = FitTarget.HULL_VERTICES,
                  policy: HoldoutPolicy = DEFAULT_POLICY, options: FitOptions = FitOptions(),
                  bayes_error_us: float = 0.0):
    """Split by ``policy``, fit on the fit set (or its hull), and score both sets.

    Returns (PowerLawFit, FitDiagnostics).
    """
    fit_set, holdout = split_holdout(points, policy)
    if target is FitTarget.ALL_POINTS and len({p.us for p in fit_set}) < 3:
        raise RankError("fit set needs at least 3 distinct upstream accuracies")
    used = fit_points_for_target(fit_set, target)
    if len(used) < 3:
        raise InsufficientDataError(f"only {len(used)} hull vertices in the fit set, need at least 3")
    fit, loss, nit = fit_curve(used, bayes_error_us, options)

    metric = options.error_metric
    if holdout:
        pe = prediction_error(fit, holdout, target, metric)
        n_hold = len(fit_points_for_target(holdout, target))
    else:
        pe, n_hold = math.nan, 0
    std, rss = residual_std(fit, used)
    diag = FitDiagnostics(
        fitting_error=fitting_error(fit, used, metric),
        prediction_error=pe,
        residual_std=std,
        residual_rss_root=rss,
        n_fit=len(used),
        n_holdout=n_hold,
        loss=loss,
        iterations=nit,
    )
    return fit, diag


def fit_to_json(fit: PowerLawFit, diagnostics: Optional[FitDiagnostics] = None) -> str:
    obj = {"k": fit.k, "alpha": fit.alpha, "e_ir": fit.e_ir, "bayes_error_us": fit.bayes_error_us}
    if diagnostics is not None:
        obj["diagnostics"] = {
            key: (None if isinstance(v, float) and math.isnan(v) else v)
            for key, v in asdict(diagnostics).items()
        }
    return json.dumps(obj, indent=2) + "\n"


def fit_from_json(text: str) -> PowerLawFit:
    obj = json.loads(text)
    return PowerLawFit(k=obj["k"], alpha=obj["alpha"], e_ir=obj["e_ir"],
                       bayes_error_us=obj.get("bayes_error_us", 0.0))


# --- sensitivity -----------------------------------------------------------------

def _trial(points, size, trial, seed, target, policy, options, bayes):
    rng = np.random.default_rng([seed, size, trial])
    idx = rng.choice(len(points), size=size, replace=False)
    sample = [points[i] for i in np.sort(idx)]
    _, diag = fit_power_law(sample, target, policy, options, bayes)
    return diag


def sample_size_sweep(points: Sequence[AccuracyPoint], sizes: Sequence[int], trials: int = 10,
                      target: FitTarget = FitTarget.HULL_VERTICES,
                      policy: HoldoutPolicy = DEFAULT_POLICY, seed: int = 0,
                      options: FitOptions = FitOptions(),
                      bayes_error_us: float = 0.0) -> list[SensitivityRow]:
    """Refit on uniform subsamples (without replacement) of each size.

    Trial randomness comes from (seed, size, trial) alone. Trials whose
    subsample cannot be fit are counted in ``n_failed``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    pts = _sorted_points(points)
    rows = []
    for size in sorted(sizes):
        if size < 3:
            raise InsufficientDataError(f"sample size {size} < 3")
        if size > len(pts):
            raise InsufficientDataError(f"sample size {size} exceeds {len(pts)} available points")
        fe, pe, failed = [], [], 0
        for t in range(trials):
            try:
                d = _trial(pts, size, t, seed, target, policy, options, bayes_error_us)
            except (InsufficientDataError, RankError, FitConvergenceError):
                failed += 1
                continue
            fe.append(d.fitting_error)
            pe.append(d.prediction_error)
        fe_a, pe_a = np.array(fe), np.array([v for v in pe if not math.isnan(v)])
        rows.append(SensitivityRow(
            sample_size=size,
            mean_fitting_error=float(fe_a.mean()) if fe_a.size else math.nan,
            std_fitting_error=float(fe_a.std()) if fe_a.size else math.nan,
            mean_prediction_error=float(pe_a.mean()) if pe_a.size else math.nan,
            std_prediction_error=float(pe_a.std()) if pe_a.size else math.nan,
            n_trials=trials - failed,
            n_failed=failed,
        ))
    return rows


def sensitivity_csv(rows: Sequence[SensitivityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(SensitivityRow.__dataclass_fields__)
    w.writerow(names)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])
    return buf.getvalue()
