"""Declarative experiments: TOML config in, plot-ready result table out.

A config names a scenario, the estimators, the training sizes and the seed.
Synthetic scenarios report RMSRE, the root of the mean squared x-risk over
the test points of one problem instance, averaged over instances with a
+-1 SE band.  Real-data runs report test RMSE (noise included) with a
delta-method SE.
"""

from __future__ import annotations

import csv
import datetime as _dt
import enum
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .data_lab import ShiftSpec, SplitRule, SyntheticSpec, load_csv, standardize
from .estimators import ConfigError, EstimatorConfig, TrainingContext, fit_estimator
from .risk_lab import FAILURE_LIMIT, Design, mean_se, simulate

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)


class Scenario(str, enum.Enum):
    SYNTHETIC_NO_SHIFT = "SyntheticNoShift"
    SYNTHETIC_SHIFT_RIDGE = "SyntheticShiftRidge"
    SYNTHETIC_SHIFT_LASSO = "SyntheticShiftLasso"
    REAL_DATA = "RealData"


class HyperMode(str, enum.Enum):
    THEORY = "Theory"
    CV = "CV"


_DEFAULT_LAM = {
    HyperMode.THEORY: {"lasso": "theory", "elastic": "cv", "ridge": "optimal"},
    HyperMode.CV: {"lasso": "cv", "elastic": "cv", "ridge": "cv"},
}


def _fill_lam(spec, mode: HyperMode):
    """Give every ridge/lasso/elastic family without ``lam`` the mode's preset."""
    if isinstance(spec, list):
        return [_fill_lam(s, mode) for s in spec]
    if isinstance(spec, str):
        spec = {"method": spec}
    if not isinstance(spec, Mapping):
        return spec
    spec = dict(spec)
    method = spec.get("method")
    if method in _DEFAULT_LAM[mode] and "lam" not in spec:
        spec["lam"] = _DEFAULT_LAM[mode][method]
    for key in ("pilot", "g"):
        if key in spec:
            spec[key] = _fill_lam(spec[key], mode)
    return spec


@dataclass(frozen=True)
class RealDataSpec:
    path: str
    target: str
    split: SplitRule
    drop_columns: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    estimators: tuple
    n_grid: tuple = ()
    hyper_mode: HyperMode = HyperMode.THEORY
    replicates: int = 20
    seed: int = 0
    output_path: str = "results"
    synthetic: SyntheticSpec | None = None
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    test_points: int = 500
    preprocess: str = "standardize"
    metric: str = "rmsre"
    real_data: RealDataSpec | None = None
    raw: Mapping = field(default_factory=dict, compare=False)

    @property
    def is_synthetic(self) -> bool:
        return self.scenario is not Scenario.REAL_DATA

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _need(d: Mapping, key: str, where: str = "config"):
    if key not in d:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return d[key]


def config_from_mapping(d: Mapping) -> ExperimentConfig:
    """Validate a parsed config; raises :class:`ConfigError` with a readable message."""
    d = dict(d)
    try:
        scenario = Scenario(_need(d, "scenario"))
    except ValueError:
        raise ConfigError(f"unknown scenario {d.get('scenario')!r}; expected one of "
                          f"{[s.value for s in Scenario]}") from None
    try:
        mode = HyperMode(d.get("hyper_mode", "Theory"))
    except ValueError:
        raise ConfigError(f"hyper_mode must be 'Theory' or 'CV', got {d.get('hyper_mode')!r}") from None
    est_raw = d.get("estimators") or []
    if not est_raw:
        raise ConfigError("estimators must be a nonempty list")
    estimators = tuple(EstimatorConfig.from_mapping(_fill_lam(e, mode)) for e in est_raw)
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise ConfigError(f"estimator names must be unique, got {names}")
    replicates = d.get("replicates", 20)
    if not isinstance(replicates, int) or replicates < 1:
        raise ConfigError("replicates must be a positive integer")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    kwargs = dict(scenario=scenario, estimators=estimators, hyper_mode=mode, replicates=replicates,
                  seed=seed, output_path=str(d.get("output_path", "results")), raw=d)
    try:
        if scenario is Scenario.REAL_DATA:
            rd = dict(_need(d, "data"))
            split = SplitRule.from_mapping(rd.get("split", {}))
            kwargs["real_data"] = RealDataSpec(str(_need(rd, "path", "data")), str(_need(rd, "target", "data")),
                                               split, tuple(rd.get("drop_columns", ())))
            kwargs["metric"] = "rmse"
            kwargs["n_grid"] = tuple(d.get("n_grid", ()))
        else:
            n_grid = d.get("n_grid") or []
            if not n_grid or not all(isinstance(n, int) and n >= 2 for n in n_grid):
                raise ConfigError("n_grid must be a nonempty list of integers >= 2")
            syn = dict(_need(d, "synthetic"))
            kwargs["test_points"] = int(syn.pop("test_points", 500))
            kwargs["preprocess"] = str(syn.pop("preprocess", "standardize"))
            syn.setdefault("n", n_grid[0])
            kwargs["synthetic"] = SyntheticSpec(**syn)
            kwargs["shift"] = ShiftSpec(**dict(d.get("shift", {})))
            kwargs["n_grid"] = tuple(n_grid)
            metric = d.get("metric", "rmsre")
            if metric not in ("rmsre", "risk"):
                raise ConfigError("metric must be 'rmsre' or 'risk'")
            kwargs["metric"] = metric
            if kwargs["preprocess"] not in ("standardize", "center", "raw"):
                raise ConfigError("preprocess must be 'standardize', 'center' or 'raw'")
            if kwargs["test_points"] < 1:
                raise ConfigError("test_points must be positive")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if scenario is Scenario.SYNTHETIC_NO_SHIFT and kwargs["shift"].kind.value != "none":
        raise ConfigError("SyntheticNoShift cannot declare a shift")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from None
    return config_from_mapping(raw)


# ---------------------------------------------------------------------------
# Result table
# ---------------------------------------------------------------------------

TABLE_FIELDS = ("scenario", "estimator", "n", "metric_name", "value", "se")


@dataclass
class ResultTable:
    rows: list
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(v)) if k in ("value", "se") else v) for k, v in r.items()
                        if k in TABLE_FIELDS})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "rows": self.rows}, indent=2)

    @classmethod
    def from_csv(cls, text: str, metadata=None) -> "ResultTable":
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        missing = set(TABLE_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"result table lacks columns {sorted(missing)}")
        for r in reader:
            rows.append({"scenario": r["scenario"], "estimator": r["estimator"], "n": int(r["n"]),
                         "metric_name": r["metric_name"], "value": float(r["value"]), "se": float(r["se"])})
        return cls(rows, dict(metadata or {}))

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        d = json.loads(text)
        return cls(list(d["rows"]), dict(d.get("metadata", {})))

    def write(self, out_dir, stem: str = "results") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@dataclass
class RunOutcome:
    table: ResultTable
    failure_rates: dict
    risks: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(rate > FAILURE_LIMIT for rate in self.failure_rates.values())


def _synthetic_rows(cfg: ExperimentConfig, jobs: int):
    rows, failures, risks = [], {}, {}
    for n in cfg.n_grid:
        spec = SyntheticSpec(n=n, p=cfg.synthetic.p, sparsity=cfg.synthetic.sparsity,
                             beta_law=cfg.synthetic.beta_law, snr_override=cfg.synthetic.snr_override)
        design = Design(spec, cfg.shift, test_points=cfg.test_points, preprocess=cfg.preprocess)
        sq = simulate(design, cfg.estimators, cfg.replicates, cfg.seed, jobs=jobs)
        for e, est in enumerate(cfg.estimators):
            per_instance = sq[e].mean(axis=-1)
            ok = np.isfinite(per_instance)
            failures[(est.name, n)] = float((~ok).mean())
            risks[(est.name, n)] = per_instance
            vals = np.sqrt(per_instance[ok]) if cfg.metric == "rmsre" else per_instance[ok]
            value, se = mean_se(vals)
            rows.append({"scenario": cfg.scenario.value, "estimator": est.name, "n": int(n),
                         "metric_name": cfg.metric, "value": value, "se": se})
    return rows, failures, risks


def real_data_rmse(cfg: ExperimentConfig):
    """Test RMSE of every estimator with a delta-method SE; also returns failure rates."""
    rd = cfg.real_data
    train, test = load_csv(rd.path, rd.target, rd.split, rd.drop_columns)
    data = standardize(train.design, train.responses)
    ctx = TrainingContext(data, seed=cfg.seed)
    rows, failures = [], {}
    for est in cfg.estimators:
        try:
            pred = fit_estimator(est, ctx)(test.design)
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, ConfigError):
                raise
            log.error("%s failed on real data: %s", est.name, exc)
            failures[(est.name, train.n)] = 1.0
            rows.append({"scenario": cfg.scenario.value, "estimator": est.name, "n": int(train.n),
                         "metric_name": "rmse", "value": float("nan"), "se": float("nan")})
            continue
        sq = (test.responses - pred) ** 2
        ok = np.isfinite(sq)
        failures[(est.name, train.n)] = float((~ok).mean())
        mse, mse_se = mean_se(sq[ok])
        rmse = math.sqrt(mse)
        rows.append({"scenario": cfg.scenario.value, "estimator": est.name, "n": int(train.n),
                     "metric_name": "rmse", "value": rmse, "se": mse_se / (2 * rmse) if rmse > 0 else 0.0})
    return rows, failures


def run_experiment(cfg: ExperimentConfig, *, jobs: int = 1, out_dir=None, timestamp: str | None = None) -> RunOutcome:
    """Run every (estimator, n) cell; write CSV and JSON when ``out_dir`` is given."""
    if cfg.is_synthetic:
        rows, failures, risks = _synthetic_rows(cfg, jobs)
    else:
        rows, failures = real_data_rmse(cfg)
        risks = {}
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        "scenario": cfg.scenario.value,
        "hyper_mode": cfg.hyper_mode.value,
        "replicates": cfg.replicates,
        "failure_rates": {f"{k[0]}@{k[1]}": v for k, v in failures.items()},
    }
    table = ResultTable(rows, meta)
    if out_dir is not None:
        table.write(out_dir)
    return RunOutcome(table, failures, risks)


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def compare_report(table: ResultTable, baseline: str):
    """Ratios of every row to the baseline row of the same scenario and ``n``.

    SEs propagate by the delta method assuming independent rows (conservative
    for paired designs).  Returns ``(text, records)``.
    """
    base = {(r["scenario"], int(r["n"])): r for r in table.rows if r["estimator"] == baseline}
    if not base:
        raise ConfigError(f"baseline {baseline!r} not found in table")
    records = []
    for r in table.rows:
        key = (r["scenario"], int(r["n"]))
        if key not in base:
            continue
        b = base[key]
        v, bv = float(r["value"]), float(b["value"])
        ratio = v / bv if bv != 0 else float("nan")
        if r is b or r["estimator"] == baseline:
            rse = 0.0
        else:
            rel = math.hypot(float(r["se"]) / v if v else 0.0, float(b["se"]) / bv if bv else 0.0)
            rse = abs(ratio) * rel
        records.append({"scenario": key[0], "n": key[1], "estimator": r["estimator"],
                        "metric_name": r["metric_name"], "ratio": ratio, "ratio_se": rse,
                        "interval": [ratio - 2 * rse, ratio + 2 * rse]})
    lines = [f"baseline: {baseline}", f"{'scenario':<22} {'n':>6}  {'estimator':<20} {'ratio':>8}  +-2SE"]
    for rec in records:
        lines.append(f"{rec['scenario']:<22} {rec['n']:>6}  {rec['estimator']:<20} {rec['ratio']:>8.4f}  "
                     f"[{rec['interval'][0]:.4f}, {rec['interval'][1]:.4f}]")
    return "\n".join(lines), records
