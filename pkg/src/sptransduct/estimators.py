"""Named prediction methods behind one interface.

An :class:`EstimatorConfig` names a method and its hyperparameters.
:func:`fit_estimator` trains it on one training set and returns a callable
mapping a batch of raw test points to raw-scale predictions, so risk and
RMSE harnesses never need to know which method they are running.

Methods and their parameters:

``oracle``    ``<x, beta0>`` (needs the truth)
``zero``      constant 0
``ols``       minimum-norm least squares
``ridge``     ``lam``: number, ``"optimal"`` (``p/SNR``, needs the truth) or ``"cv"``
``lasso``     ``lam``: number, ``"theory"``, ``"conservative"`` or ``"cv"``
``elastic``   ``lam``: number or ``"cv"``; ``l1_ratio`` for fixed ``lam``
``jm``        ``pilot`` (a lasso/ridge/elastic/ols spec) and ``lambda_w``
              (number, ``"theory"`` or ``"real"`` grid)
``om``        ``moment`` F or Q, ``pilot`` (outcome family), ``g`` (family or
              list of families), ``k_folds``, ``tau``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import base_regress as br
from .data_lab import StandardizedDataset, derive_seed
from .jm_debias import REAL_DATA_GRID, JmSolver, predict_jm, theory_lambda_w_grid
from .om_debias import MomentKind, OmEstimator

log = logging.getLogger(__name__)

METHODS = ("oracle", "zero", "ols", "ridge", "lasso", "elastic", "jm", "om")


class ConfigError(ValueError):
    """An estimator or experiment configuration is malformed."""


@dataclass(frozen=True)
class EstimatorConfig:
    name: str
    method: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"estimator {self.name!r}: unknown method {self.method!r}")
        object.__setattr__(self, "params", dict(self.params))
        _check_params(self)

    @classmethod
    def from_mapping(cls, d: Mapping) -> "EstimatorConfig":
        d = dict(d)
        try:
            name = d.pop("name")
            method = d.pop("method")
        except KeyError as exc:
            raise ConfigError(f"estimator entry is missing {exc.args[0]!r}") from None
        params = d.pop("params", {})
        params = {**params, **d}
        return cls(str(name), str(method), params)


def _check_params(cfg: EstimatorConfig) -> None:
    p = cfg.params
    try:
        if cfg.method in ("ridge", "lasso", "elastic"):
            _family_from(cfg.method, p)
        elif cfg.method == "jm":
            _family_from_spec(p.get("pilot", {"method": "lasso", "lam": "theory"}), allow_custom=False)
            lw = p.get("lambda_w", "theory")
            if not (lw in ("theory", "real") or (isinstance(lw, (int, float)) and lw > 0)):
                raise ConfigError(f"lambda_w must be 'theory', 'real' or positive, got {lw!r}")
        elif cfg.method == "om":
            MomentKind(p.get("moment", "F"))
            _family_from_spec(p.get("pilot", {"method": "lasso", "lam": "theory"}), allow_custom=False)
            g = p.get("g", {"method": "lasso", "lam": "theory"})
            for spec in (g if isinstance(g, list) else [g]):
                _family_from_spec(spec)
            k = p.get("k_folds", 5)
            if not isinstance(k, int) or k < 2:
                raise ConfigError("k_folds must be an integer >= 2")
            if float(p.get("tau", 0.0)) < 0:
                raise ConfigError("tau must be non-negative")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"estimator {cfg.name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Hyperparameter resolution
# ---------------------------------------------------------------------------

@dataclass
class TrainingContext:
    """One training set plus what data-dependent presets may need."""

    data: StandardizedDataset
    truth: np.ndarray | None = None
    noise_sd: float = 1.0
    seed: int = 0
    cache: dict = field(default_factory=dict)

    @property
    def snr(self) -> float:
        if self.truth is None:
            raise ConfigError("the 'optimal' ridge preset needs the ground truth")
        return float(self.truth @ self.truth) / self.noise_sd**2


_SYMBOLIC = {"theory", "conservative", "optimal"}


def _family_from(method: str, p: Mapping) -> br.RegressorFamily:
    """A family from a flat spec; symbolic ``lam`` values are resolved later."""
    lam = p.get("lam", "cv")
    if method == "zero":
        return br.RegressorFamily(br.FamilyKind.ZERO)
    if method == "ols":
        return br.RegressorFamily(br.FamilyKind.OLS)
    if method not in ("ridge", "lasso", "elastic"):
        raise ConfigError(f"{method!r} is not a regression family")
    if lam == "cv":
        plan = _plan(method, p)
        return br.RegressorFamily(br.FamilyKind(method + "_cv"), plan=plan)
    if isinstance(lam, str):
        if lam not in _SYMBOLIC:
            raise ConfigError(f"unknown lambda preset {lam!r}")
        if (lam == "optimal") != (method == "ridge"):
            raise ConfigError(f"lambda preset {lam!r} does not apply to {method}")
        # placeholder value; resolve() substitutes the data-dependent one
        return br.RegressorFamily(br.FamilyKind(method), lam=1.0, l1_ratio=float(p.get("l1_ratio", 1.0)),
                                  label=lam)
    if not float(lam) > 0 and method != "ridge":
        raise ConfigError("lambda must be positive")
    if float(lam) < 0:
        raise ConfigError("lambda must be non-negative")
    ratio = float(p.get("l1_ratio", 1.0))
    if method == "elastic" and not 0.0 < ratio <= 1.0:
        raise ConfigError("l1_ratio must lie in (0, 1]")
    return br.RegressorFamily(br.FamilyKind(method), lam=float(lam), l1_ratio=ratio)


def _plan(method: str, p: Mapping) -> br.CvPlan:
    if method == "ridge":
        grid = p.get("grid", tuple(br.RIDGE_GRID_REAL))
        folds = p.get("folds", br.LEAVE_ONE_OUT)
        return br.CvPlan(grid=tuple(grid), folds=folds)
    grid = p.get("grid", tuple(br.LASSO_GRID))
    ratios = p.get("l1_ratio_grid", br.L1_RATIO_GRID) if method == "elastic" else None
    return br.CvPlan(grid=tuple(grid), folds=p.get("folds", 5), l1_ratio_grid=ratios)


def _family_from_spec(spec, *, allow_custom: bool = True) -> br.RegressorFamily:
    if isinstance(spec, br.RegressorFamily):
        if spec.kind is br.FamilyKind.CUSTOM and not allow_custom:
            raise ConfigError("a custom learner cannot serve as a linear pilot")
        return spec
    if isinstance(spec, str):
        spec = {"method": spec}
    spec = dict(spec)
    method = spec.pop("method", None)
    if method is None:
        raise ConfigError("family spec needs a 'method'")
    return _family_from(method, spec)


def resolve(fam: br.RegressorFamily, ctx: TrainingContext, n: int | None = None,
            p: int | None = None) -> br.RegressorFamily:
    """Substitute data-dependent presets for a training set of ``n x p``."""
    if fam.label not in _SYMBOLIC:
        return fam
    n = ctx.data.n if n is None else n
    p = ctx.data.p if p is None else p
    if fam.label == "theory":
        lam = br.theory_lasso_lambda(n, p, noise_sd=ctx.noise_sd)
    elif fam.label == "conservative":
        s = int(np.count_nonzero(ctx.truth)) if ctx.truth is not None else p
        lam = br.conservative_lasso_lambda(n, p, s, noise_sd=ctx.noise_sd)
    else:
        lam = p / ctx.snr
    return br.RegressorFamily(fam.kind, lam=lam, l1_ratio=fam.l1_ratio, label=f"{fam.kind.value}:{fam.label}")


def _pilot(fam: br.RegressorFamily, ctx: TrainingContext) -> br.FittedLinearModel:
    fam = resolve(fam, ctx)
    key = ("pilot", fam.kind, fam.lam, fam.l1_ratio, fam.plan)
    if key not in ctx.cache:
        ctx.cache[key] = fam.fit_dataset(ctx.data, derive_seed(ctx.seed, "pilot-cv"))
    return ctx.cache[key]


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def fit_estimator(cfg: EstimatorConfig, ctx: TrainingContext):
    """Train ``cfg`` and return ``predict(x_raw_batch) -> raw predictions``."""
    m = cfg.method
    if m == "oracle":
        if ctx.truth is None:
            raise ConfigError("the oracle needs the ground truth")
        truth = ctx.truth
        return lambda xs: np.asarray(xs, dtype=float) @ truth
    if m == "zero":
        return lambda xs: np.zeros(np.atleast_2d(xs).shape[0])
    if m in ("ols", "ridge", "lasso", "elastic"):
        model = _pilot(_family_from(m, cfg.params), ctx)
        return lambda xs: br.predict(model, np.atleast_2d(xs))
    if m == "jm":
        return _fit_jm(cfg, ctx)
    return _fit_om(cfg, ctx)


def _fit_jm(cfg: EstimatorConfig, ctx: TrainingContext):
    data = ctx.data
    pilot = _pilot(_family_from_spec(cfg.params.get("pilot", {"method": "lasso", "lam": "theory"})), ctx)
    lw = cfg.params.get("lambda_w", "theory")
    if lw == "theory":
        grid = theory_lambda_w_grid(data.n, data.p)
    elif lw == "real":
        grid = REAL_DATA_GRID
    else:
        grid = np.array([float(lw)])
    key = ("jm-solver",)
    if key not in ctx.cache:
        ctx.cache[key] = JmSolver(data.X)
    solver = ctx.cache[key]

    def predict(xs):
        out = []
        for x in np.atleast_2d(xs):
            xs_std = data.transform(x)
            lam = solver.select_lambda_w(xs_std, grid)
            pred, _ = predict_jm(data, pilot, xs_std, lam, solver=solver, standardized=True)
            out.append(pred.value)
        return np.array(out)

    return predict


def _fit_om(cfg: EstimatorConfig, ctx: TrainingContext):
    data = ctx.data
    p = cfg.params
    moment = MomentKind(p.get("moment", "F"))
    k = int(p.get("k_folds", 5))
    pilot_fam = _family_from_spec(p.get("pilot", {"method": "lasso", "lam": "theory"}), allow_custom=False)
    g_spec = p.get("g", {"method": "lasso", "lam": "theory"})
    g_specs = g_spec if isinstance(g_spec, list) else [g_spec]
    m_train = data.n - int(np.ceil(data.n / k))  # smallest leave-fold-out size
    g_fams = [resolve(_family_from_spec(s), ctx, n=m_train) for s in g_specs]
    outcome = resolve(pilot_fam, ctx, n=m_train)
    pilot = _pilot(pilot_fam, ctx)
    est = OmEstimator(data, moment, outcome, g_fams, k_folds=k, seed=derive_seed(ctx.seed, "om-folds"),
                      tau=float(p.get("tau", 0.0)))

    def predict(xs):
        return np.array([est.predict(x, pilot=pilot).value for x in np.atleast_2d(xs)])

    return predict
