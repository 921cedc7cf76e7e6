"""Monte Carlo x-risk and closed-form lower bounds.

The risk of a predictor at a test point ``x`` is
``E[(y_hat - <x, beta0>)^2]``: the noise of a fresh response is left out.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_lab import (ProblemInstance, ShiftSpec, StandardizedDataset, SyntheticSpec,
                       derive_seed, draw_instance, draw_truth, sample_test_points,
                       standardize)
from .estimators import ConfigError, EstimatorConfig, TrainingContext, fit_estimator

log = logging.getLogger(__name__)

FAILURE_LIMIT = 0.01


# ---------------------------------------------------------------------------
# Norms and bounds
# ---------------------------------------------------------------------------

def trimmed_norm(x, s: int) -> float:
    """Sum of the ``s`` largest magnitudes of ``x``."""
    a = np.abs(np.asarray(x, dtype=float).ravel())
    if not 0 <= s <= a.size:
        raise ValueError(f"s must lie in [0, {a.size}]")
    if s == 0:
        return 0.0
    return float(np.sort(a)[::-1][:s].sum())


def trimmed_dual_norm(x, s: int) -> float:
    """Dual of :func:`trimmed_norm`: ``max(|x|_1 / s, |x|_inf)``."""
    a = np.abs(np.asarray(x, dtype=float).ravel())
    if not 1 <= s <= a.size:
        raise ValueError(f"s must lie in [1, {a.size}]")
    return float(max(a.sum() / s, a.max()))


class BoundKind(str, enum.Enum):
    RIDGE_THM1 = "RidgeThm1"
    RIDGE_COR1 = "RidgeCor1"
    LASSO_LOWER = "LassoThm2Lower"
    LASSO_UPPER_SHAPE = "LassoThm2Upper-shape"


@dataclass(frozen=True)
class BoundValue:
    kind: BoundKind
    value: float
    inputs: dict = field(default_factory=dict)
    in_regime: bool = True

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("bound values are non-negative")


def _cos2(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float((a @ b) / (na * nb)) ** 2


def ridge_lower_bound(beta0, sigma_eps: float, n: int, lam: float, x_star) -> BoundValue:
    """``(|b|^2/s^2) (n/4) ((lam/n)/(lam/n + 7))^2 |x|^2 (s^2/n) cos^2(x, b)``.

    Valid for ``n >= p >= 20``; other shapes are evaluated and flagged.
    """
    beta0 = np.asarray(beta0, dtype=float)
    x = np.asarray(x_star, dtype=float)
    p = beta0.shape[0]
    in_regime = n >= p >= 20
    if not in_regime:
        warnings.warn(f"ridge bound evaluated outside n >= p >= 20 (n={n}, p={p})", stacklevel=2)
    r = lam / n
    value = ((beta0 @ beta0) / sigma_eps**2 * (n / 4) * (r / (r + 7)) ** 2
             * (x @ x) * sigma_eps**2 / n * _cos2(x, beta0))
    return BoundValue(BoundKind.RIDGE_THM1, float(value),
                      {"n": n, "p": p, "lambda": lam, "sigma_eps": sigma_eps}, in_regime)


def ridge_optimal_lower_bound(beta0, sigma_eps: float, n: int, x_star) -> BoundValue:
    """The closed form at ``lam = p/SNR``: ``p^2/(n SNR) |x|^2 s^2/n cos^2 / 784``."""
    beta0 = np.asarray(beta0, dtype=float)
    x = np.asarray(x_star, dtype=float)
    p = beta0.shape[0]
    snr = (beta0 @ beta0) / sigma_eps**2
    value = p**2 / (n * snr) * (x @ x) * sigma_eps**2 / n * _cos2(x, beta0) / 784
    return BoundValue(BoundKind.RIDGE_COR1, float(value),
                      {"n": n, "p": p, "snr": float(snr), "sigma_eps": sigma_eps}, n >= p >= 20)


def optimal_ridge_lambda(p: int, snr: float) -> float:
    """``p / SNR`` for the objective ``|y - Xb|^2 + lam |b|^2``."""
    if not snr > 0:
        raise ValueError("snr must be positive")
    return p / snr


def lasso_lower_bound_shape(x_star, s: int, lam: float) -> tuple[BoundValue, BoundValue]:
    """``lam^2 |x|_(s)^2``, shared by the lower and upper bounds up to unknown constants."""
    if s < 1:
        raise ValueError("s must be at least 1")
    shape = lam**2 * trimmed_norm(x_star, s) ** 2
    inputs = {"s": s, "lambda": lam, "constants": "universal, unspecified"}
    return (BoundValue(BoundKind.LASSO_LOWER, shape, inputs),
            BoundValue(BoundKind.LASSO_UPPER_SHAPE, shape, inputs))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

class XStarMode(str, enum.Enum):
    FIXED = "FixedAcrossReplicates"
    FRESH = "FreshPerReplicate"


@dataclass(frozen=True)
class RiskReport:
    estimator_name: str
    replicates: int
    risk_mean: float
    risk_se: float
    seeds: str
    failures: int = 0
    n: int | None = None
    p: int | None = None
    s: int | None = None
    shift: str = "none"
    seed: int | None = None

    @property
    def valid(self) -> bool:
        return self.failures <= FAILURE_LIMIT * (self.replicates + self.failures)

    def to_row(self) -> dict:
        return {"estimator": self.estimator_name, "n": self.n, "p": self.p, "s": self.s,
                "shift": self.shift, "risk_mean": self.risk_mean, "risk_se": self.risk_se,
                "replicates": self.replicates, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "valid": self.valid})


CSV_FIELDS = ("estimator", "n", "p", "s", "shift", "risk_mean", "risk_se", "replicates", "seed")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                    for k, v in r.to_row().items()})
    return buf.getvalue()


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error with a deterministic (pairwise) reduction."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    mean = float(np.sum(v) / v.size)  # numpy sums pairwise
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return mean, se


@dataclass(frozen=True)
class Design:
    """Everything a replicate needs to draw its data and test points.

    ``truth`` fixes ``beta0`` across replicates (drawn once from ``spec``
    when absent); ``x_star`` fixes the test point and overrides ``shift``.
    """

    spec: SyntheticSpec
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    x_star_mode: XStarMode = XStarMode.FRESH
    test_points: int = 1
    truth: np.ndarray | None = None
    x_star: np.ndarray | None = None
    preprocess: str = "standardize"
    noise_sd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_star_mode", XStarMode(self.x_star_mode))
        if self.preprocess not in ("standardize", "center", "raw"):
            raise ValueError("preprocess must be 'standardize', 'center' or 'raw'")
        if self.test_points < 1:
            raise ValueError("test_points must be positive")


def _prep(inst: ProblemInstance, mode: str) -> StandardizedDataset:
    if mode == "raw":
        return StandardizedDataset.identity(inst.design, inst.responses)
    return standardize(inst.design, inst.responses, scale=(mode == "standardize"))


def _truth_for(design: Design, seed: int, rep: int) -> np.ndarray:
    if design.truth is not None:
        return np.asarray(design.truth, dtype=float)
    return draw_truth(design.spec, derive_seed(seed, "truth", rep), design.noise_sd)


def _replicate(design: Design, estimators, seed: int, rep: int, fixed_x):
    """Squared errors ``(len(estimators), test_points)``; NaN rows mark failures."""
    truth = _truth_for(design, seed, rep)
    inst = draw_instance(truth, design.spec.n, derive_seed(seed, "instance", rep), design.noise_sd)
    if fixed_x is not None:
        xs = np.atleast_2d(fixed_x)
    elif design.x_star is not None:
        xs = np.atleast_2d(np.asarray(design.x_star, dtype=float))
    else:
        xs = sample_test_points(inst, design.shift, design.test_points, derive_seed(seed, "test", rep))
    target = xs @ truth
    data = _prep(inst, design.preprocess)
    ctx = TrainingContext(data, truth=truth, noise_sd=design.noise_sd, seed=derive_seed(seed, "fit", rep))
    out = np.full((len(estimators), xs.shape[0]), np.nan)
    for i, cfg in enumerate(estimators):
        try:
            pred = fit_estimator(cfg, ctx)(xs)
            out[i] = (pred - target) ** 2
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, ConfigError):
                raise
            log.warning("replicate %d: %s failed: %s", rep, cfg.name, exc)
    return out


def _fixed_x(design: Design, seed: int):
    if design.x_star_mode is not XStarMode.FIXED or design.x_star is not None:
        return None
    truth = _truth_for(design, seed, 0)
    probe = ProblemInstance(np.zeros((1, truth.size)), np.zeros(1), truth, design.noise_sd, seed)
    return sample_test_points(probe, design.shift, design.test_points, derive_seed(seed, "test-fixed"))


def simulate(design: Design, estimators, replicates: int, seed: int, *, jobs: int = 1) -> np.ndarray:
    """Per-replicate, per-test-point squared errors, shape ``(E, R, T)``.

    Every estimator sees the same instances and test points, so comparisons
    are paired.  Results do not depend on ``jobs``.
    """
    if replicates < 1:
        raise ValueError("replicates must be positive")
    estimators = list(estimators)
    fixed = _fixed_x(design, seed)
    if jobs == 1:
        parts = [_replicate(design, estimators, seed, r, fixed) for r in range(replicates)]
    else:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=jobs)(delayed(_replicate)(design, estimators, seed, r, fixed)
                                      for r in range(replicates))
    return np.stack(parts, axis=1)


def summarize(sq_errors: np.ndarray, name: str, design: Design, seed: int) -> RiskReport:
    """Average over test points, then mean and SE over the surviving replicates."""
    per_rep = sq_errors.mean(axis=-1)
    ok = np.isfinite(per_rep)
    mean, se = mean_se(per_rep[ok])
    spec = design.spec
    shift = design.shift.kind.value if design.x_star is None else "fixed_x_star"
    return RiskReport(name, int(ok.sum()), mean, se, f"SeedSequence({seed}) / instance,test,fit,truth",
                      int((~ok).sum()), spec.n, spec.p, spec.sparsity, shift, seed)


def monte_carlo_risk(instance_spec: SyntheticSpec, shift: ShiftSpec, predictor: EstimatorConfig,
                     x_star_mode=XStarMode.FRESH, replicates: int = 200, seed: int = 0, *,
                     truth=None, x_star=None, test_points: int = 1, preprocess: str = "standardize",
                     jobs: int = 1) -> RiskReport:
    """Estimate ``E[(y_hat - <x, beta0>)^2]`` for one predictor."""
    if replicates < 2:
        raise ValueError("need at least two replicates")
    design = Design(instance_spec, shift, x_star_mode, test_points,
                    None if truth is None else np.asarray(truth, dtype=float),
                    None if x_star is None else np.asarray(x_star, dtype=float), preprocess)
    sq = simulate(design, [predictor], replicates, seed, jobs=jobs)[0]
    report = summarize(sq, predictor.name, design, seed)
    if not report.valid:
        log.warning("%s: %d of %d replicates failed", predictor.name, report.failures, replicates)
    return report
