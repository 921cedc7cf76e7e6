"""Orthogonal-moment prediction at a single test point.

The test direction ``x`` defines an orthogonal change of basis
``U = |x| [u1; R]`` with ``u1 = x/|x|``.  In the new coordinates each row
splits into a treatment ``t = <x, x_i>/|x|^2`` and controls
``z = R x_i / |x|``, and ``<x_i, b> = t_i <x, b> + z_i'f`` with ``f = |x| R b``.
The target ``theta = <x, beta>`` is then a partially linear coefficient,
estimated from a Neyman-orthogonal moment with K-fold cross-fitting:

* ``F``: ``sum (y - z'f_hat)(t - g_hat(z)) / sum t (t - g_hat(z))``
* ``Q``: ``sum (y - q_hat(z))(t - g_hat(z)) / sum (t - g_hat(z))^2``

The nuisance regressions ``g`` and ``q`` are fit in the unit-scale
coordinates ``(|x| t, |x| z) = (u1'x_i, R x_i)``, which have the same scale
as the standardized covariates.  Predictions are mapped back, so the fitted
functions are the same for OLS, while penalty levels keep their usual
calibration and the estimate is equivariant under rescaling ``x``.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .base_regress import (FamilyKind, FittedLinearModel, LinearPredictor, RegressorFamily,
                           kfold_indices)
from .data_lab import StandardizedDataset, derive_seed

log = logging.getLogger(__name__)


class MomentKind(str, enum.Enum):
    F = "F"
    Q = "Q"


# ---------------------------------------------------------------------------
# Reparametrization
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Reparam:
    """Householder-based orthonormal completion of ``x_star``.

    The reflector ``I - 2 v v'/v'v`` with ``v = u1 + sign(u1[0]) e1`` maps
    ``e1`` to ``-sign(u1[0]) u1``; its rows 2..p are an orthonormal basis of
    the complement of ``u1`` and form ``basis_r`` (materialized on request).
    """

    x_star: np.ndarray
    u1: np.ndarray
    norm: float
    _v: np.ndarray
    _sign: float

    @property
    def p(self) -> int:
        return self.x_star.shape[0]

    @property
    def householder(self) -> np.ndarray:
        """Orthogonal ``H`` with first row ``u1`` (the reflector, first row sign-fixed)."""
        H = np.eye(self.p) - np.outer(self._v, self._v) * (2.0 / (self._v @ self._v))
        H[0] *= self._sign
        return H

    @property
    def basis_r(self) -> np.ndarray:
        return self.householder[1:]

    @property
    def U(self) -> np.ndarray:
        return self.norm * np.vstack([self.u1, self.basis_r])

    @property
    def U_inv(self) -> np.ndarray:
        # U / |x| is orthogonal
        return self.U.T / self.norm**2

    def reflect(self, A: np.ndarray) -> np.ndarray:
        """``A @ H_raw`` for the unsigned reflector, row by row (``A`` is ``m x p``)."""
        v = self._v
        return A - np.outer(A @ v, v) * (2.0 / (v @ v))

    def coordinates(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Treatment ``t`` and controls ``z`` of each row of ``X``."""
        X = np.asarray(X, dtype=float)
        t = X @ self.x_star / self.norm**2
        z = self.reflect(X)[:, 1:] / self.norm
        return t, z

    def split_coef(self, beta) -> tuple[float, np.ndarray]:
        """``(theta, f)`` with ``U beta = [theta; f]``."""
        beta = np.asarray(beta, dtype=float)
        theta = float(self.x_star @ beta)
        f = self.norm * self.reflect(beta[None, :])[0, 1:]
        return theta, f


def build_reparam(x_star) -> Reparam:
    x = np.array(x_star, dtype=float)
    if x.ndim != 1:
        raise ValueError("x_star must be a vector")
    norm = float(np.linalg.norm(x))
    if not norm > 0 or not np.isfinite(norm):
        raise ValueError("x_star must be nonzero and finite")
    u1 = x / norm
    sign = 1.0 if u1[0] >= 0 else -1.0
    v = u1.copy()
    v[0] += sign
    x.setflags(write=False)
    u1.setflags(write=False)
    v.setflags(write=False)
    return Reparam(x, u1, norm, v, -sign)


# ---------------------------------------------------------------------------
# Decomposition and first stages
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OmDecomposition:
    treatment: np.ndarray
    controls: np.ndarray
    folds: tuple
    reparam: Reparam
    theta_true: float | None = None

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    def fold_of(self) -> np.ndarray:
        owner = np.empty(self.n, dtype=np.intp)
        for k, idx in enumerate(self.folds):
            owner[idx] = k
        return owner


def _folds(n: int, k_folds: int, seed: int) -> tuple:
    if k_folds == n:
        return tuple(np.array([i]) for i in range(n))
    return tuple(kfold_indices(n, k_folds, seed))


def decompose(data: StandardizedDataset, reparam: Reparam, k_folds: int, seed: int,
              truth=None) -> OmDecomposition:
    """Coordinates of every standardized row plus a seeded fold partition.

    ``truth`` (standardized scale, synthetic data only) fills ``theta_true``.
    """
    if not 2 <= k_folds <= data.n:
        raise ValueError(f"k_folds must lie in [2, {data.n}]")
    if reparam.p != data.p:
        raise ValueError("x_star and data disagree on p")
    t, z = reparam.coordinates(data.X)
    theta = None if truth is None else float(reparam.x_star @ np.asarray(truth, dtype=float))
    return OmDecomposition(t, z, _folds(data.n, k_folds, seed), reparam, theta)


@dataclass(frozen=True, eq=False)
class FirstStageFits:
    """Cross-fitted nuisance predictions.

    ``outcome_pred[i]`` is ``z_i'f_hat`` (F) or ``q_hat(z_i)`` (Q) and
    ``g_pred[i]`` is ``g_hat(z_i)``, both from the model that excluded row
    ``i``'s fold.  The per-fold models are kept for inspection.
    """

    outcome_pred: np.ndarray
    g_pred: np.ndarray
    moment: MomentKind
    g_method: str
    outcome_models: tuple = ()
    g_models: tuple = ()
    excluded_folds: tuple = ()


def _train_mask(n: int, idx: np.ndarray) -> np.ndarray:
    keep = np.ones(n, dtype=bool)
    keep[idx] = False
    return keep


class _Rescaled:
    """``z -> model(scale * z) / out_scale`` for a model fit in unit-scale coordinates."""

    def __init__(self, model, scale: float, out_scale: float = 1.0):
        self.model = model
        self.scale = scale
        self.out_scale = out_scale

    def __call__(self, z):
        return self.model(np.asarray(z) * self.scale) / self.out_scale


def _fit_nuisance(fam: RegressorFamily, z, resp, norm: float, seed: int, target: str) -> _Rescaled:
    # target "t": regress |x| t on |x| z; target "y": regress y on |x| z
    if target == "t":
        return _Rescaled(fam.fit(z * norm, resp * norm, seed), norm, norm)
    return _Rescaled(fam.fit(z * norm, resp, seed), norm)


def fit_first_stage(dec: OmDecomposition, data: StandardizedDataset, moment, pilot_family: RegressorFamily,
                    g_family: RegressorFamily, seed: int = 0) -> FirstStageFits:
    """Fit the K outcome and K treatment regressions, each without its own fold.

    For ``F`` the outcome model is ``pilot_family`` fit on ``(X, y)`` and
    turned into ``f_hat``; for ``Q`` it is fit directly on ``(z, y)``.
    """
    moment = MomentKind(moment)
    n = dec.n
    out = np.empty(n)
    g = np.empty(n)
    out_models, g_models = [], []
    for k, idx in enumerate(dec.folds):
        keep = _train_mask(n, idx)
        fold_seed = derive_seed(seed, "om-fold", k)
        if moment is MomentKind.F:
            beta = _fit_coef(pilot_family, data.X[keep], data.y[keep], fold_seed)
            _, f_hat = dec.reparam.split_coef(beta)
            model = LinearPredictor(f_hat)
        else:
            model = _fit_nuisance(pilot_family, dec.controls[keep], data.y[keep], dec.reparam.norm, fold_seed, "y")
        out[idx] = model(dec.controls[idx])
        g_model = _fit_nuisance(g_family, dec.controls[keep], dec.treatment[keep], dec.reparam.norm,
                                fold_seed, "t")
        g[idx] = g_model(dec.controls[idx])
        out_models.append(model)
        g_models.append(g_model)
    return FirstStageFits(out, g, moment, g_family.name, tuple(out_models), tuple(g_models),
                          tuple(tuple(int(i) for i in idx) for idx in dec.folds))


def _fit_coef(family: RegressorFamily, X, y, seed) -> np.ndarray:
    model = family.fit(X, y, seed)
    if not isinstance(model, LinearPredictor):
        raise ValueError("the F moment needs a linear outcome family")
    return model.coef


def oracle_first_stage(dec: OmDecomposition, moment, outcome_coef, g_coef) -> FirstStageFits:
    """Nuisances fixed at known linear functions of ``z`` (no fitting)."""
    out = dec.controls @ np.asarray(outcome_coef, dtype=float)
    g = dec.controls @ np.asarray(g_coef, dtype=float)
    return FirstStageFits(out, g, MomentKind(moment), "oracle")


# ---------------------------------------------------------------------------
# Moment equations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OmPrediction:
    value: float
    mu2: float
    thresholded: bool
    moment_kind: MomentKind
    variance_estimate: float
    g_method: str = ""
    pilot_value: float = float("nan")
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "value": self.value,
            "mu2": self.mu2,
            "thresholded": self.thresholded,
            "moment_kind": MomentKind(self.moment_kind).value,
            "variance_estimate": self.variance_estimate,
            "g_method": self.g_method,
        })


def estimate_mu2(dec: OmDecomposition, fits: FirstStageFits, moment=None) -> float:
    moment = MomentKind(moment or fits.moment)
    r = dec.treatment - fits.g_pred
    if moment is MomentKind.F:
        return float(np.mean(dec.treatment * r))
    return float(np.mean(r * r))


# mu2 below this fraction of mean(t^2) is round-off, treated as zero
_MU2_FLOOR = 1e-12


def _solve_moment(t, y, out_pred, g_pred, moment: MomentKind):
    """Return ``(theta, mu2, variance)`` for the centered responses ``y``.

    The variance is the sandwich plug-in ``mean(psi^2) / (n J^2)`` with
    ``J`` the derivative of the moment in ``theta``, i.e. ``-mu2``.
    """
    n = t.shape[0]
    r = t - g_pred
    e = y - out_pred
    if moment is MomentKind.F:
        mu2 = float(np.mean(t * r))
        regressor = t
    else:
        mu2 = float(np.mean(r * r))
        regressor = r
    if not mu2 > _MU2_FLOOR * np.mean(t * t):
        return np.nan, mu2, np.inf
    theta = float(np.mean(e * r) / mu2)
    psi = (e - regressor * theta) * r
    var = float(np.mean(psi * psi) / (n * mu2 * mu2))
    return theta, mu2, var


def predict_om(dec: OmDecomposition, fits: FirstStageFits, data: StandardizedDataset,
               pilot: FittedLinearModel, moment=None, tau: float = 0.0) -> OmPrediction:
    """Solve the empirical moment equation; fall back to the pilot when ``mu2 <= tau``.

    The returned value is on the raw response scale (the response mean is
    added back), as is the pilot fallback.
    """
    moment = MomentKind(moment or fits.moment)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    pilot_value = float(dec.reparam.x_star @ pilot.coefficients + pilot.intercept)
    theta, mu2, var = _solve_moment(dec.treatment, data.y, fits.outcome_pred, fits.g_pred, moment)
    if mu2 <= tau or not np.isfinite(theta):
        degenerate = not np.isfinite(theta)
        if degenerate:
            log.warning("OM: mu2 = %.3e is not (numerically) positive; returning the pilot prediction", mu2)
        return OmPrediction(pilot_value, mu2, True, moment, var if np.isfinite(var) else float("inf"),
                            fits.g_method, pilot_value, degenerate)
    return OmPrediction(theta + data.response_mean, mu2, False, moment, var, fits.g_method, pilot_value)


def plugin_variance(dec: OmDecomposition, data: StandardizedDataset, fits: FirstStageFits,
                    moment=None) -> float:
    """Sandwich estimate of ``Var(y_hat)``; ``inf`` when the moment is degenerate."""
    moment = MomentKind(moment or fits.moment)
    return _solve_moment(dec.treatment, data.y, fits.outcome_pred, fits.g_pred, moment)[2]


def select_g_method(dec: OmDecomposition, data: StandardizedDataset, candidates, moment,
                    pilot_family: RegressorFamily, seed: int = 0):
    """Pick the treatment regression with the smallest plug-in variance.

    Returns ``(family, variance, fits, flagged)``; ``flagged`` is true when
    every candidate was degenerate and the first one was returned.
    Ties break toward the earlier candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one g candidate")
    moment = MomentKind(moment)
    base = fit_first_stage(dec, data, moment, pilot_family, RegressorFamily(FamilyKind.ZERO), seed)
    best = None
    first = None
    for fam in candidates:
        g = _cross_fit(dec, fam, seed)
        fits = FirstStageFits(base.outcome_pred, g, moment, fam.name, base.outcome_models)
        var = plugin_variance(dec, data, fits, moment)
        if first is None:
            first = (fam, var, fits)
        if np.isfinite(var) and (best is None or var < best[1]):
            best = (fam, var, fits)
    if best is None:
        log.warning("OM: every g candidate is degenerate; using %s", first[0].name)
        return first[0], first[1], first[2], True
    return best[0], best[1], best[2], False


def _cross_fit(dec: OmDecomposition, fam: RegressorFamily, seed: int) -> np.ndarray:
    g = np.empty(dec.n)
    for k, idx in enumerate(dec.folds):
        keep = _train_mask(dec.n, idx)
        model = _fit_nuisance(fam, dec.controls[keep], dec.treatment[keep], dec.reparam.norm,
                              derive_seed(seed, "om-fold", k), "t")
        g[idx] = model(dec.controls[idx])
    return g


# ---------------------------------------------------------------------------
# Many test points on one training set
# ---------------------------------------------------------------------------

@dataclass
class OmEstimator:
    """OM predictions for many test points sharing one training set.

    Folds, per-fold Gram matrices and (for ``F``) the per-fold outcome
    coefficients are computed once.  For Gram-solvable families the
    per-point regressions on ``z`` only need ``H G H``, a rank-two update of
    the fold Gram, so a test point costs ``O(np)`` plus the solver.
    ``g_family`` may be a list, in which case the variance-minimizing
    candidate is chosen per point.
    """

    data: StandardizedDataset
    moment: MomentKind
    outcome_family: RegressorFamily
    g_family: object
    k_folds: int = 5
    seed: int = 0
    tau: float = 0.0
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.moment = MomentKind(self.moment)
        if not 2 <= self.k_folds <= self.data.n:
            raise ValueError(f"k_folds must lie in [2, {self.data.n}]")
        self.candidates = list(self.g_family) if isinstance(self.g_family, (list, tuple)) else [self.g_family]
        if not self.candidates:
            raise ValueError("need at least one g candidate")
        X, y = self.data.X, self.data.y
        self.folds = _folds(self.data.n, self.k_folds, self.seed)
        G_all, c_all = X.T @ X, X.T @ y
        self.fold_stats = []
        for idx in self.folds:
            Xo, yo = X[idx], y[idx]
            self.fold_stats.append((G_all - Xo.T @ Xo, c_all - Xo.T @ yo, self.data.n - idx.size))
        self.fold_beta = None
        if self.moment is MomentKind.F:
            if not self.outcome_family.gram_solvable and self.outcome_family.kind is FamilyKind.CUSTOM:
                raise ValueError("the F moment needs a linear outcome family")
            self.fold_beta = []
            for k, idx in enumerate(self.folds):
                keep = _train_mask(self.data.n, idx)
                if self.outcome_family.gram_solvable:
                    G, c, m = self.fold_stats[k]
                    beta = self.outcome_family.coef_from_gram(G, c, m)
                else:
                    beta = _fit_coef(self.outcome_family, X[keep], y[keep], derive_seed(self.seed, "om-fold", k))
                self.fold_beta.append(beta)

    def _fold_reg(self, rep: Reparam, fam: RegressorFamily, k: int, z: np.ndarray, target: str) -> np.ndarray:
        """Fold-``k`` regression of ``target`` (t or y) on ``z``.

        Returns a coefficient vector acting on ``z`` or a callable model.
        """
        G, c_y, m = self.fold_stats[k]
        if fam.gram_solvable:
            v = rep._v
            kap = 2.0 / (v @ v)
            a = G @ v
            gam = v @ a
            # H G H for the unsigned reflector; the sign flip only touches row/col 0
            HGH = G - kap * (np.outer(v, a) + np.outer(a, v)) + kap * kap * gam * np.outer(v, v)
            Gz = HGH[1:, 1:]
            if target == "t":
                Gu = G @ rep.u1
                coef = fam.coef_from_gram(Gz, (Gu - kap * v * (v @ Gu))[1:], m)
                return coef
            coef = fam.coef_from_gram(Gz, (c_y - kap * v * (v @ c_y))[1:], m)
            return coef * rep.norm
        keep = _train_mask(self.data.n, self.folds[k])
        resp = (self.data.X[keep] @ rep.x_star / rep.norm**2) if target == "t" else self.data.y[keep]
        return _fit_nuisance(fam, z[keep], resp, rep.norm, derive_seed(self.seed, "om-fold", k), target)

    def _cross_predict(self, rep, fam, z, target):
        pred = np.empty(self.data.n)
        for k, idx in enumerate(self.folds):
            model = self._fold_reg(rep, fam, k, z, target)
            pred[idx] = z[idx] @ model if isinstance(model, np.ndarray) else model(z[idx])
        return pred

    def predict(self, x_star, *, pilot: FittedLinearModel, standardized: bool = False) -> OmPrediction:
        xs = np.asarray(x_star, dtype=float) if standardized else self.data.transform(x_star)
        rep = build_reparam(xs)
        t, z = rep.coordinates(self.data.X)
        if self.moment is MomentKind.F:
            out = np.empty(self.data.n)
            for k, idx in enumerate(self.folds):
                beta = self.fold_beta[k]
                out[idx] = self.data.X[idx] @ beta - t[idx] * (xs @ beta)
        else:
            out = self._cross_predict(rep, self.outcome_family, z, "y")
        dec = OmDecomposition(t, z, self.folds, rep)
        best = None
        for fam in self.candidates:
            g = self._cross_predict(rep, fam, z, "t") if fam.kind is not FamilyKind.ZERO else np.zeros(self.data.n)
            fits = FirstStageFits(out, g, self.moment, fam.name)
            var = plugin_variance(dec, self.data, fits)
            if best is None or (np.isfinite(var) and (not np.isfinite(best[1]) or var < best[1])):
                best = (fits, var)
            if len(self.candidates) == 1:
                break
        return predict_om(dec, best[0], self.data, pilot, self.moment, self.tau)
