"""Inductive baselines: OLS, ridge, Lasso and elastic net, with cross-validation.

All fits run on a :class:`~sptransduct.data_lab.StandardizedDataset`; the
intercept is the stored response mean, never a fitted column.

Objectives (``n`` rows):

* ridge   ``|y - Xb|^2 + lam |b|^2``
* Lasso   ``|y - Xb|^2 / (2n) + lam |b|_1``
* elastic ``|y - Xb|^2 / (2n) + lam (r |b|_1 + (1 - r)/2 |b|^2)``
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .data_lab import StandardizedDataset, rng_stream

log = logging.getLogger(__name__)

KKT_TOL = 1e-8
CHANGE_TOL = 1e-10
MAX_SWEEPS = 100_000

LASSO_GRID = np.logspace(-6, 1, 100)
RIDGE_GRID_SYNTHETIC = np.logspace(-2, 6, 100)
RIDGE_GRID_REAL = np.logspace(-6, 1, 100)
L1_RATIO_GRID = (0.1, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0)


class FitError(RuntimeError):
    """A solver failed to reach its stopping rule."""


class RegKind(str, enum.Enum):
    NONE = "none"
    RIDGE = "ridge"
    LASSO = "lasso"
    ELASTIC = "elastic"


@dataclass(frozen=True)
class Regularizer:
    kind: RegKind = RegKind.NONE
    lam: float = 0.0
    l1_ratio: float | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "lambda": self.lam, "l1_ratio": self.l1_ratio}


@dataclass(frozen=True)
class SolverReport:
    iterations: int = 0
    final_gap: float = 0.0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class FittedLinearModel:
    """Coefficients on the standardized scale plus what is needed to predict raw points."""

    coefficients: np.ndarray
    intercept: float
    regularizer: Regularizer = field(default_factory=Regularizer)
    solver_report: SolverReport = field(default_factory=SolverReport)
    column_means: np.ndarray | None = None
    column_sds: np.ndarray | None = None

    def __post_init__(self):
        beta = np.ascontiguousarray(self.coefficients, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "coefficients", beta)

    @property
    def p(self) -> int:
        return self.coefficients.shape[0]

    def standardize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.column_means is None:
            return x
        return (x - self.column_means) / self.column_sds

    def to_json(self) -> str:
        return json.dumps({
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "regularizer": self.regularizer.to_dict(),
            "solver_report": {
                "iterations": self.solver_report.iterations,
                "final_duality_or_kkt_gap": self.solver_report.final_gap,
                "converged": self.solver_report.converged,
            },
        })


def _model(data: StandardizedDataset, beta, reg, report=SolverReport()) -> FittedLinearModel:
    return FittedLinearModel(beta, data.response_mean, reg, report, data.column_means, data.column_sds)


def predict(model: FittedLinearModel, x, *, standardized: bool = False):
    """Raw-scale prediction ``<x_std, beta> + intercept``; ``x`` may be a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.p:
        raise ValueError(f"x has {x.shape[-1]} features, model has {model.p}")
    xs = x if standardized else model.standardize(x)
    return xs @ model.coefficients + model.intercept


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def fit_ols(data: StandardizedDataset) -> FittedLinearModel:
    """Minimum-norm least squares."""
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    return _model(data, beta, Regularizer())


def ridge_coefficients(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    n, p = X.shape
    if lam == 0.0:
        return np.linalg.lstsq(X, y, rcond=None)[0]
    if p <= n:
        A = X.T @ X
        A[np.diag_indices_from(A)] += lam
        return scipy.linalg.solve(A, X.T @ y, assume_a="pos")
    K = X @ X.T
    K[np.diag_indices_from(K)] += lam
    return X.T @ scipy.linalg.solve(K, y, assume_a="pos")


def ridge_from_gram(G: np.ndarray, c: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(G + lam I) b = c`` where ``G = X'X``, ``c = X'y`` (unnormalized)."""
    A = G.copy()
    A[np.diag_indices_from(A)] += lam
    if lam == 0.0:
        return np.linalg.lstsq(A, c, rcond=None)[0]
    return scipy.linalg.solve(A, c, assume_a="pos")


def fit_ridge(data: StandardizedDataset, lam: float) -> FittedLinearModel:
    if lam < 0:
        raise ValueError("ridge lambda must be non-negative")
    beta = ridge_coefficients(data.X, data.y, float(lam))
    return _model(data, beta, Regularizer(RegKind.RIDGE, float(lam)))


# ---------------------------------------------------------------------------
# Coordinate descent
# ---------------------------------------------------------------------------

def penalized_from_gram(G, c, l1, l2, beta0=None, *, max_sweeps=MAX_SWEEPS,
                        tol_change=CHANGE_TOL, tol_kkt=KKT_TOL, strict=True):
    """Minimize ``0.5 b'Gb - c'b + l1 |b|_1 + 0.5 l2 |b|^2`` by coordinate descent.

    ``G = X'X/n`` and ``c = X'y/n``.  Returns ``(beta, SolverReport)``.
    """
    G = np.ascontiguousarray(G, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    beta = np.zeros(c.shape[0]) if beta0 is None else np.array(beta0, dtype=float)
    if l1 > 0 and np.max(np.abs(c), initial=0.0) <= l1 and not beta.any():
        return beta, SolverReport(0, max(0.0, float(np.max(np.abs(c), initial=0.0)) - l1), True)
    sweeps, gap, ok = kernels.lasso_cd_gram(G, c, float(l1), float(l2), beta,
                                            int(max_sweeps), float(tol_change), float(tol_kkt))
    report = SolverReport(int(sweeps), float(gap), bool(ok))
    if not ok:
        msg = f"coordinate descent stopped after {sweeps} sweeps with KKT gap {gap:.3e}"
        if strict:
            raise FitError(msg)
        log.warning(msg)
    return beta, report


def lasso_objective(X, y, beta, lam, l1_ratio=1.0) -> float:
    n = X.shape[0]
    r = y - X @ beta
    pen = l1_ratio * np.abs(beta).sum() + 0.5 * (1.0 - l1_ratio) * beta @ beta
    return float(r @ r / (2 * n) + lam * pen)


def fit_lasso(data: StandardizedDataset, lam: float, *, warm_start=None, **solver) -> FittedLinearModel:
    if not lam > 0:
        raise ValueError("Lasso lambda must be positive")
    n = data.n
    G = data.X.T @ data.X / n
    c = data.X.T @ data.y / n
    beta, report = penalized_from_gram(G, c, lam, 0.0, warm_start, **solver)
    return _model(data, beta, Regularizer(RegKind.LASSO, float(lam)), report)


def fit_elastic(data: StandardizedDataset, lam: float, l1_ratio: float, *, warm_start=None,
                **solver) -> FittedLinearModel:
    if not 0.0 < l1_ratio <= 1.0:
        raise ValueError("l1_ratio must lie in (0, 1]")
    if not lam > 0:
        raise ValueError("elastic-net lambda must be positive")
    n = data.n
    G = data.X.T @ data.X / n
    c = data.X.T @ data.y / n
    beta, report = penalized_from_gram(G, c, lam * l1_ratio, lam * (1.0 - l1_ratio), warm_start, **solver)
    return _model(data, beta, Regularizer(RegKind.ELASTIC, float(lam), float(l1_ratio)), report)


def theory_lasso_lambda(n: int, p: int, scale: float = 4.0, noise_sd: float = 1.0) -> float:
    """``scale * sigma * sqrt(log p / n)``; ``scale=4`` is the experiment preset."""
    return scale * noise_sd * math.sqrt(math.log(p) / n)


def conservative_lasso_lambda(n: int, p: int, s: int, noise_sd: float = 1.0) -> float:
    """``80 sigma sqrt(log(2ep/s) / n)``, the level assumed by the upper bounds."""
    return 80.0 * noise_sd * math.sqrt(math.log(2 * math.e * p / max(s, 1)) / n)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

LEAVE_ONE_OUT = "loo"


@dataclass(frozen=True)
class CvPlan:
    grid: tuple = tuple(LASSO_GRID)
    folds: int | str = 5
    l1_ratio_grid: tuple | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or np.any(grid <= 0):
            raise ValueError("CV grid must be a nonempty vector of positive values")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("CV grid must be strictly increasing")
        object.__setattr__(self, "grid", tuple(float(g) for g in grid))
        if self.folds != LEAVE_ONE_OUT and (not isinstance(self.folds, (int, np.integer)) or self.folds < 2):
            raise ValueError("folds must be an integer >= 2 or 'loo'")
        if self.l1_ratio_grid is not None:
            r = tuple(float(v) for v in self.l1_ratio_grid)
            if not all(0.0 < v <= 1.0 for v in r):
                raise ValueError("l1 ratios must lie in (0, 1]")
            object.__setattr__(self, "l1_ratio_grid", r)


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if not 2 <= k <= n:
        raise ValueError(f"cannot build {k} folds from {n} rows")
    perm = rng_stream(seed, "folds", k).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _pick(scores: np.ndarray, grid: np.ndarray) -> int:
    """Index of the best score; exact-score ties go to the larger lambda."""
    best = scores.min()
    ties = np.flatnonzero(scores <= best * (1 + 1e-12) + 1e-300)
    return int(ties[np.argmax(grid[ties])])


def ridge_loo_scores(X: np.ndarray, y: np.ndarray, grid) -> np.ndarray:
    """Leave-one-out MSE for every ridge lambda via the leverage shortcut."""
    U, d, _ = np.linalg.svd(X, full_matrices=False)
    Uty = U.T @ y
    d2 = d**2
    out = np.empty(len(grid))
    for i, lam in enumerate(grid):
        shrink = d2 / (d2 + lam)
        fitted = U @ (shrink * Uty)
        lev = (U**2) @ shrink
        out[i] = np.mean(((y - fitted) / (1.0 - lev)) ** 2)
    return out


def _path_scores(X, y, folds, grid_desc, l1_ratio):
    """Mean held-out MSE along a warm-started decreasing-lambda path."""
    n, p = X.shape
    scores = np.zeros(len(grid_desc))
    G_all = X.T @ X
    c_all = X.T @ y
    for idx in folds:
        Xo, yo = X[idx], y[idx]
        m = n - idx.size
        G = (G_all - Xo.T @ Xo) / m
        c = (c_all - Xo.T @ yo) / m
        beta = np.zeros(p)
        for i, lam in enumerate(grid_desc):
            beta, _ = penalized_from_gram(G, c, lam * l1_ratio, lam * (1 - l1_ratio), beta, strict=False)
            r = yo - Xo @ beta
            scores[i] += r @ r / idx.size
    return scores / len(folds)


def cross_validate(data: StandardizedDataset, family: str, plan: CvPlan, seed: int = 0) -> FittedLinearModel:
    """Pick the grid point with minimal mean CV MSE and refit on all rows."""
    family = RegKind(family)
    grid = np.asarray(plan.grid)
    X, y = data.X, data.y
    if family is RegKind.RIDGE:
        if plan.folds == LEAVE_ONE_OUT:
            scores = ridge_loo_scores(X, y, grid)
        else:
            folds = kfold_indices(data.n, int(plan.folds), seed)
            scores = np.zeros(grid.size)
            for idx in folds:
                keep = np.ones(data.n, dtype=bool)
                keep[idx] = False
                for i, lam in enumerate(grid):
                    r = y[idx] - X[idx] @ ridge_coefficients(X[keep], y[keep], lam)
                    scores[i] += r @ r / idx.size
            scores /= len(folds)
        return fit_ridge(data, grid[_pick(scores, grid)])

    if plan.folds == LEAVE_ONE_OUT:
        folds = [np.array([i]) for i in range(data.n)]
    else:
        folds = kfold_indices(data.n, int(plan.folds), seed)
    ratios = (1.0,) if family is RegKind.LASSO else (plan.l1_ratio_grid or L1_RATIO_GRID)
    grid_desc = grid[::-1]
    best = (np.inf, None, None)
    for r in ratios:
        scores = _path_scores(X, y, folds, grid_desc, r)[::-1]
        i = _pick(scores, grid)
        if scores[i] < best[0]:
            best = (scores[i], grid[i], r)
    _, lam, r = best
    if family is RegKind.LASSO:
        return fit_lasso(data, lam)
    return fit_elastic(data, lam, r)


# ---------------------------------------------------------------------------
# Families: a regressor configuration usable as a first-stage learner
# ---------------------------------------------------------------------------

class FamilyKind(str, enum.Enum):
    OLS = "ols"
    RIDGE = "ridge"
    LASSO = "lasso"
    ELASTIC = "elastic"
    RIDGE_CV = "ridge_cv"
    LASSO_CV = "lasso_cv"
    ELASTIC_CV = "elastic_cv"
    ZERO = "zero"
    CUSTOM = "custom"


_FIXED = {FamilyKind.RIDGE, FamilyKind.LASSO, FamilyKind.ELASTIC}


@dataclass(frozen=True)
class RegressorFamily:
    """How to fit a nuisance regression.

    Fixed-penalty kinds need ``lam``; CV kinds use ``plan``; ``custom`` takes
    a ``factory`` returning an object with ``fit(X, y)`` and ``predict(X)``
    (the scikit-learn contract), which is where non-linear learners plug in.
    """

    kind: FamilyKind
    lam: float | None = None
    l1_ratio: float = 1.0
    plan: CvPlan | None = None
    factory: object = None
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        if self.kind in _FIXED and self.lam is None:
            raise ValueError(f"{self.kind.value} family needs lam")
        if self.kind is FamilyKind.CUSTOM and not callable(self.factory):
            raise ValueError("custom family needs a callable factory")

    @property
    def name(self) -> str:
        return self.label or self.kind.value

    @property
    def gram_solvable(self) -> bool:
        """True when the fit depends on the data only through ``X'X`` and ``X'y``."""
        return self.kind in _FIXED or self.kind in (FamilyKind.ZERO, FamilyKind.OLS)

    def coef_from_gram(self, G: np.ndarray, c: np.ndarray, m: int) -> np.ndarray:
        """Coefficients from unnormalized ``G = X'X``, ``c = X'y`` over ``m`` rows."""
        k = self.kind
        if k is FamilyKind.ZERO:
            return np.zeros(c.shape[0])
        if k is FamilyKind.OLS:
            return np.linalg.lstsq(G, c, rcond=None)[0]
        if k is FamilyKind.RIDGE:
            return ridge_from_gram(G, c, self.lam)
        l1 = self.lam * (1.0 if k is FamilyKind.LASSO else self.l1_ratio)
        l2 = 0.0 if k is FamilyKind.LASSO else self.lam * (1.0 - self.l1_ratio)
        beta, _ = penalized_from_gram(G / m, c / m, l1, l2, strict=False)
        return beta

    def fit(self, X: np.ndarray, y: np.ndarray, seed: int = 0):
        """Fit on raw arrays (no centering); returns a predictor ``Z -> values``.

        Linear fits return a :class:`LinearPredictor` exposing ``coef``.
        """
        k = self.kind
        if k is FamilyKind.CUSTOM:
            model = self.factory()
            model.fit(X, y)
            return model.predict
        if self.gram_solvable:
            return LinearPredictor(self.coef_from_gram(X.T @ X, X.T @ y, X.shape[0]))
        data = StandardizedDataset.identity(X, y)
        if k is FamilyKind.RIDGE_CV:
            plan = self.plan or CvPlan(grid=tuple(RIDGE_GRID_REAL), folds=LEAVE_ONE_OUT)
            fitted = cross_validate(data, "ridge", plan, seed)
        elif k is FamilyKind.LASSO_CV:
            fitted = cross_validate(data, "lasso", self.plan or CvPlan(), seed)
        else:
            plan = self.plan or CvPlan(l1_ratio_grid=L1_RATIO_GRID)
            fitted = cross_validate(data, "elastic", plan, seed)
        return LinearPredictor(np.array(fitted.coefficients))

    def fit_dataset(self, data: StandardizedDataset, seed: int = 0) -> FittedLinearModel:
        """Full-data fit of a linear family, as a pilot model."""
        k = self.kind
        if k is FamilyKind.OLS:
            return fit_ols(data)
        if k is FamilyKind.RIDGE:
            return fit_ridge(data, self.lam)
        if k is FamilyKind.LASSO:
            return fit_lasso(data, self.lam)
        if k is FamilyKind.ELASTIC:
            return fit_elastic(data, self.lam, self.l1_ratio)
        if k is FamilyKind.RIDGE_CV:
            plan = self.plan or CvPlan(grid=tuple(RIDGE_GRID_REAL), folds=LEAVE_ONE_OUT)
            return cross_validate(data, "ridge", plan, seed)
        if k is FamilyKind.LASSO_CV:
            return cross_validate(data, "lasso", self.plan or CvPlan(), seed)
        if k is FamilyKind.ELASTIC_CV:
            return cross_validate(data, "elastic", self.plan or CvPlan(l1_ratio_grid=L1_RATIO_GRID), seed)
        if k is FamilyKind.ZERO:
            return _model(data, np.zeros(data.p), Regularizer())
        raise ValueError(f"{k.value} family cannot act as a linear pilot")


@dataclass(frozen=True, eq=False)
class LinearPredictor:
    coef: np.ndarray

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.coef
