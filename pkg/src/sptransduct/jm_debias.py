"""One-step debiased prediction at a single test point.

For a test direction ``x`` the weight vector solves

    min_w  w' S w   s.t.  |S w - x|_inf <= lam_w,      S = X'X / n,

and the prediction is ``<x, b> + w' X'(y - X b) / n`` for a pilot ``b``.
An infeasible program yields ``w = 0``, i.e. the pilot prediction.

Any optimum can be taken supported on the active constraints with
multipliers ``mu = -2 w``, which makes the KKT system of the program
identical to that of ``min 0.5 v'Sv - x'v + lam_w |v|_1``.  The default
solver is therefore coordinate descent on that penalized problem.  When it
fails to certify, ADMM in the eigenbasis of ``S`` followed by an active-set
polish takes over.  Either way the returned ``w`` carries a KKT certificate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.stats

from . import kernels
from .base_regress import FittedLinearModel
from .data_lab import StandardizedDataset

log = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-7
KKT_TOL = 1e-6
TIKHONOV = 1e-12
REAL_DATA_GRID = np.logspace(-7, 2, 100)


class JmSolverError(RuntimeError):
    """Feasibility could not be decided (distinct from proven infeasibility)."""


@dataclass(frozen=True, eq=False)
class JmProgramResult:
    w: np.ndarray
    feasible: bool
    lambda_w: float
    kkt_residual: float
    objective: float
    iterations: int = 0
    status: str = "optimal"

    def to_json(self) -> str:
        return json.dumps({
            "lambda_w": self.lambda_w,
            "feasible": self.feasible,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "status": self.status,
        })


@dataclass(frozen=True)
class JmPrediction:
    value: float
    pilot_value: float
    correction: float
    ci: tuple | None = None


def theory_lambda_w_grid(n: int, p: int) -> np.ndarray:
    """The two-point preset ``{0.01, 1} * sqrt(log p / n)``."""
    base = math.sqrt(math.log(p) / n)
    return np.array([0.01 * base, base])


class JmSolver:
    """Caches the eigendecomposition of ``S`` so many test points share it."""

    def __init__(self, design: np.ndarray, *, max_iter: int = 20_000, tol: float = 1e-10,
                 check_every: int = 10, method: str = "cd"):
        if method not in ("cd", "admm"):
            raise ValueError("method must be 'cd' or 'admm'")
        self.method = method
        X = np.asarray(design, dtype=float)
        self.n, self.p = X.shape
        self.sigma = np.ascontiguousarray(X.T @ X / self.n)
        eig, Q = np.linalg.eigh(self.sigma)
        top = max(float(eig[-1]), 0.0)
        self.rank_tol = max(self.p, self.n) * np.finfo(float).eps * max(top, 1.0) * 10
        eig = np.where(eig > self.rank_tol, eig, 0.0)
        self.eig = np.ascontiguousarray(eig)
        self.Q = np.ascontiguousarray(Q)
        self.QT = np.ascontiguousarray(Q.T)
        self.rank = int(np.count_nonzero(eig))
        self.max_iter = max_iter
        self.tol = tol
        self.check_every = check_every
        self._scale = max(top, 1e-300)

    # -- feasibility -------------------------------------------------------

    def min_violation(self, x_star) -> float:
        """``min_w |S w - x|_inf``: the program is feasible iff ``lam_w`` is at least this."""
        x = np.asarray(x_star, dtype=float)
        if self.rank == self.p:
            return 0.0
        if self.rank == 0:
            return float(np.max(np.abs(x)))
        B = self.Q[:, self.eig > 0]  # orthonormal basis of range(S)
        r = B.shape[1]
        # variables (coef in range basis, t); minimize t s.t. |B coef - x| <= t
        cost = np.zeros(r + 1)
        cost[-1] = 1.0
        ones = np.ones((self.p, 1))
        A_ub = np.block([[B, -ones], [-B, -ones]])
        b_ub = np.concatenate([x, -x])
        bounds = [(None, None)] * r + [(0, None)]
        res = scipy.optimize.linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if res.status != 0:
            raise JmSolverError(f"feasibility LP failed: {res.message}")
        coef = res.x[:r]
        return float(np.max(np.abs(B @ coef - x)))

    def is_feasible(self, x_star, lambda_w: float) -> bool:
        d = self.min_violation(x_star)
        return d <= lambda_w * (1 + 1e-9) + 1e-12

    # -- certificates ------------------------------------------------------

    def kkt_residual(self, w: np.ndarray, x: np.ndarray, lam: float) -> float:
        """Worst violation among primal feasibility, sign and complementarity,
        using multipliers ``mu = -2 w``; relative to the scale of ``x``."""
        if not np.any(w):
            return max(0.0, float(np.max(np.abs(x))) - lam)
        r = self.sigma @ w - x
        scale = max(1.0, float(np.max(np.abs(x))))
        primal = max(0.0, float(np.max(np.abs(r) - lam)))
        slack = lam - np.abs(r)  # >= 0 when feasible; 0 on active rows
        w_scale = np.abs(w) * self._scale
        comp = float(np.max(w_scale * np.maximum(slack, 0.0)))
        # an upper-active row (r = +lam) needs mu >= 0, i.e. w <= 0
        sign = float(np.max(np.maximum(w * np.sign(r), 0.0) * self._scale))
        return max(primal, comp, sign) / scale

    # -- solve -------------------------------------------------------------

    def _polish(self, s: np.ndarray, x: np.ndarray, lam: float, band: float):
        r = s - x
        active = np.flatnonzero(np.abs(r) >= lam - band)
        if active.size == 0:
            return None
        signs = np.sign(r[active])
        S_AA = self.sigma[np.ix_(active, active)]
        rhs = x[active] + lam * signs
        w_A, *_ = np.linalg.lstsq(S_AA, rhs, rcond=None)
        w = np.zeros(self.p)
        w[active] = w_A
        return w

    def solve(self, x_star, lambda_w: float) -> JmProgramResult:
        x = np.ascontiguousarray(x_star, dtype=float)
        lam = float(lambda_w)
        if x.shape != (self.p,):
            raise ValueError(f"x_star must have length {self.p}")
        if not lam > 0:
            raise ValueError("lambda_w must be positive")
        if lam >= float(np.max(np.abs(x))):
            return JmProgramResult(np.zeros(self.p), True, lam, 0.0, 0.0, 0, "optimal")
        if not self.is_feasible(x, lam):
            return JmProgramResult(np.zeros(self.p), False, lam, 0.0, 0.0, 0, "infeasible")
        if self.method == "cd":
            w = np.zeros(self.p)
            sweeps, _, _ = kernels.lasso_cd_gram(self.sigma, x, lam, 0.0, w, self.max_iter, 0.0, KKT_TOL * 1e-3)
            res = self.kkt_residual(w, x, lam)
            polished = self._polish(self.sigma @ w, x, lam, 1e-7 * max(1.0, lam))
            if polished is not None:
                res_p = self.kkt_residual(polished, x, lam)
                if res_p < res:
                    w, res = polished, res_p
            if res <= KKT_TOL:
                return JmProgramResult(w, True, lam, float(res), float(w @ self.sigma @ w),
                                       int(sweeps), "optimal")
        return self._solve_admm(x, lam)

    def _solve_admm(self, x: np.ndarray, lam: float) -> JmProgramResult:
        u = np.clip(np.zeros(self.p), x - lam, x + lam)
        v = np.zeros(self.p)
        rho = 1.0
        total = 0
        best = None
        tol = 1e-6
        while True:
            w_eig, s, iters, rho, r_norm, d_norm, conv = kernels.jm_admm(
                self.QT, self.Q, self.eig, x, lam, TIKHONOV, rho, u, v,
                self.max_iter - total, tol, tol, self.check_every)
            total += iters
            for band in (1e-9, 1e-7, 1e-5, 1e-3):
                w = self._polish(s, x, lam, band * max(1.0, lam))
                if w is None:
                    continue
                res = self.kkt_residual(w, x, lam)
                if best is None or res < best[1]:
                    best = (w, res)
                if res <= KKT_TOL * 1e-2:
                    break
            if best is not None and best[1] <= KKT_TOL * 1e-2:
                break
            if total >= self.max_iter or tol <= self.tol:
                break
            tol = max(tol * 1e-2, self.tol)

        w_admm = self.Q @ w_eig
        res_admm = self.kkt_residual(w_admm, x, lam)
        if best is None or res_admm < best[1]:
            best = (w_admm, res_admm)
        w, res = best
        status = "optimal" if res <= KKT_TOL else "inaccurate"
        if status != "optimal":
            log.warning("JM program: KKT residual %.2e after %d ADMM iterations", res, total)
        return JmProgramResult(w, True, lam, float(res), float(w @ self.sigma @ w), total, status)

    def select_lambda_w(self, x_star, grid) -> float | None:
        """Smallest grid value with a feasible program, or ``None`` (use the pilot)."""
        grid = np.asarray(grid, dtype=float)
        if grid.size == 0:
            raise ValueError("lambda_w grid is empty")
        d = self.min_violation(x_star)
        ok = grid[grid * (1 + 1e-9) + 1e-12 >= d]
        return float(ok.min()) if ok.size else None


def solve_jm_program(design, x_star, lambda_w: float) -> JmProgramResult:
    return JmSolver(design).solve(x_star, lambda_w)


def select_lambda_w(design, x_star, grid) -> float | None:
    return JmSolver(design).select_lambda_w(x_star, grid)


def predict_jm(data: StandardizedDataset, pilot: FittedLinearModel, x_star, lambda_w,
               *, solver: JmSolver | None = None, standardized: bool = False):
    """Debiased prediction at a raw-scale ``x_star``.

    ``lambda_w=None`` means no feasible level was found: the pilot is returned.
    Returns ``(JmPrediction, JmProgramResult | None)``.
    """
    xs = np.asarray(x_star, dtype=float) if standardized else data.transform(x_star)
    beta = pilot.coefficients
    pilot_value = float(xs @ beta + pilot.intercept)
    if lambda_w is None:
        return JmPrediction(pilot_value, pilot_value, 0.0), None
    solver = solver or JmSolver(data.X)
    program = solver.solve(xs, lambda_w)
    if not np.any(program.w):
        return JmPrediction(pilot_value, pilot_value, 0.0), program
    resid = data.y - data.X @ beta
    correction = float(program.w @ (data.X.T @ resid)) / data.n
    return JmPrediction(pilot_value + correction, pilot_value, correction), program


def residual_noise_sd(data: StandardizedDataset, pilot: FittedLinearModel) -> float:
    """Plug-in noise level from pilot residuals, degrees of freedom = active set size."""
    resid = data.y - data.X @ pilot.coefficients
    dof = max(data.n - int(np.count_nonzero(pilot.coefficients)), 1)
    return float(np.sqrt(resid @ resid / dof))


def jm_confidence_interval(pred: JmPrediction, program: JmProgramResult | None, design,
                           noise_sd: float, alpha: float, bias_allowance: float = 0.0):
    """``value +- (1.01/sqrt(n)) z_{alpha/2} sigma sqrt(w'Sw) + K2/sqrt(n)``.

    With the default ``bias_allowance=0`` only the Gaussian term is reported
    and the interval does not account for pilot bias.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    n = np.shape(design)[0]
    z = scipy.stats.norm.ppf(1.0 - alpha / 2.0)
    quad = 0.0 if program is None else max(program.objective, 0.0)
    half = 1.01 / math.sqrt(n) * z * noise_sd * math.sqrt(quad) + bias_allowance / math.sqrt(n)
    return (pred.value - half, pred.value + half)
