"""Problem instances: synthetic generators, test-point shift laws, CSV ingest
and the centering/scaling pipeline applied before every fit."""

from __future__ import annotations

import dataclasses
import enum
import json
import operator
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised for invalid specs, malformed CSV input or impossible splits."""


# ---------------------------------------------------------------------------
# Seed streams
# ---------------------------------------------------------------------------

def _tag_key(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("integer stream tags must be non-negative")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *tags)``.

    Tags may be strings (hashed with CRC32) or non-negative integers, so
    replicate ``r`` of purpose ``"design"`` is ``rng_stream(seed, "design", r)``.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(_tag_key(t) for t in tags))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *tags) -> int:
    """A 63-bit integer seed for a child stream."""
    return int(rng_stream(seed, *tags).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

class BetaLaw(str, enum.Enum):
    FIRST_S_GAUSSIAN = "first_s_gaussian"
    ISOTROPIC_SCALED = "isotropic_scaled"


class ShiftKind(str, enum.Enum):
    NONE = "none"
    MEAN_SHIFT_TOWARD_BETA = "mean_shift_toward_beta"
    COV_SHIFT_RANK_ONE = "cov_shift_rank_one"
    COV_SHIFT_ON_SUPPORT = "cov_shift_on_support"


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    p: int
    sparsity: int
    beta_law: BetaLaw = BetaLaw.FIRST_S_GAUSSIAN
    snr_override: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta_law", BetaLaw(self.beta_law))
        if self.n < 1 or self.p < 1:
            raise DataError("n and p must be positive")
        if not 0 <= self.sparsity <= self.p:
            raise DataError(f"sparsity {self.sparsity} outside [0, {self.p}]")
        if self.snr_override is not None:
            if not self.snr_override > 0:
                raise DataError("snr_override must be positive")
            if self.sparsity == 0:
                raise DataError("snr_override needs a nonzero truth")


@dataclass(frozen=True)
class ShiftSpec:
    kind: ShiftKind = ShiftKind.NONE
    mean_scale: float = 10.0
    cov_scale: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))

    @property
    def needs_truth(self) -> bool:
        return self.kind is not ShiftKind.NONE


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    design: np.ndarray
    responses: np.ndarray
    truth: np.ndarray | None = None
    noise_sd: float | None = None
    seed: int = 0

    def __post_init__(self):
        X = np.ascontiguousarray(self.design, dtype=float)
        y = np.ascontiguousarray(self.responses, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"design {X.shape} and responses {y.shape} disagree")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "responses", y)
        if self.truth is not None:
            b = np.ascontiguousarray(self.truth, dtype=float)
            if b.shape != (X.shape[1],):
                raise DataError("truth must have length p")
            if self.noise_sd is None:
                raise DataError("a synthetic truth requires noise_sd")
            object.__setattr__(self, "truth", b)
        for arr in (self.design, self.responses, self.truth):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "p": self.p,
            "seed": int(self.seed),
            "design": self.design.tolist(),
            "responses": self.responses.tolist(),
        }
        if self.truth is not None:
            payload["truth"] = self.truth.tolist()
            payload["noise_sd"] = float(self.noise_sd)
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "ProblemInstance":
        d = json.loads(text)
        X = np.asarray(d["design"], dtype=float).reshape(d["n"], d["p"])
        return cls(X, np.asarray(d["responses"], dtype=float),
                   None if d.get("truth") is None else np.asarray(d["truth"], dtype=float),
                   d.get("noise_sd"), d.get("seed", 0))


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def draw_truth(spec: SyntheticSpec, seed: int, noise_sd: float = 1.0) -> np.ndarray:
    rng = rng_stream(seed, "truth")
    beta = np.zeros(spec.p)
    s = spec.sparsity
    if spec.beta_law is BetaLaw.FIRST_S_GAUSSIAN:
        beta[:s] = rng.standard_normal(s)
    else:
        # N(0, p^{-1/2} I): the variance, not the sd, is p^{-1/2}
        beta[:s] = rng.standard_normal(s) * spec.p ** -0.25
    if spec.snr_override is not None:
        norm2 = float(beta @ beta)
        if norm2 == 0.0:
            raise DataError("cannot rescale an all-zero truth to a target SNR")
        beta *= np.sqrt(spec.snr_override * noise_sd**2 / norm2)
    return beta


def draw_instance(truth: np.ndarray, n: int, seed: int, noise_sd: float = 1.0) -> ProblemInstance:
    """Gaussian design ``N(0, I_p)`` and Gaussian noise around a fixed truth."""
    truth = np.asarray(truth, dtype=float)
    X = rng_stream(seed, "design").standard_normal((n, truth.shape[0]))
    eps = rng_stream(seed, "noise").standard_normal(n) * noise_sd
    return ProblemInstance(X, X @ truth + eps, truth, float(noise_sd), seed)


def generate_instance(spec: SyntheticSpec, seed: int) -> ProblemInstance:
    """Draw ``(X, y, beta0)`` with ``X_ij ~ N(0,1)``, ``eps ~ N(0,1)``."""
    return draw_instance(draw_truth(spec, seed), spec.n, seed, noise_sd=1.0)


def sample_test_points(instance: ProblemInstance, shift: ShiftSpec, count: int,
                       seed: int) -> np.ndarray:
    """``count`` independent test points from the shift law, shape ``(count, p)``."""
    if shift.needs_truth and instance.truth is None:
        raise DataError(f"shift {shift.kind.value} requires the ground-truth parameter")
    rng = rng_stream(seed, "x_star", shift.kind.value)
    p = instance.p
    kind = shift.kind
    if kind is ShiftKind.NONE:
        return rng.standard_normal((count, p))
    beta = instance.truth
    if kind is ShiftKind.MEAN_SHIFT_TOWARD_BETA:
        return shift.mean_scale * beta + rng.standard_normal((count, p))
    if kind is ShiftKind.COV_SHIFT_RANK_ONE:
        # N(0, c beta beta') is a scalar Gaussian multiple of beta
        return np.sqrt(shift.cov_scale) * rng.standard_normal((count, 1)) * beta
    support = beta != 0
    out = np.zeros((count, p))
    out[:, support] = np.sqrt(shift.cov_scale) * rng.standard_normal((count, int(support.sum())))
    return out


def sample_test_point(instance: ProblemInstance, shift: ShiftSpec, seed: int) -> np.ndarray:
    return sample_test_points(instance, shift, 1, seed)[0]


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StandardizedDataset:
    """Centered (and usually scaled) training data plus the map back to raw scale.

    ``x_raw -> (x_raw - column_means) / column_sds`` sends a raw point into
    the fitted coordinates; predictions add ``response_mean`` back.
    """

    centered_design: np.ndarray
    centered_responses: np.ndarray
    column_means: np.ndarray
    column_sds: np.ndarray
    response_mean: float
    constant_columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        for name in ("centered_design", "centered_responses", "column_means", "column_sds"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.constant_columns.shape[0] != self.p:
            object.__setattr__(self, "constant_columns", np.zeros(self.p, dtype=bool))

    @property
    def X(self) -> np.ndarray:
        return self.centered_design

    @property
    def y(self) -> np.ndarray:
        return self.centered_responses

    @property
    def n(self) -> int:
        return self.centered_design.shape[0]

    @property
    def p(self) -> int:
        return self.centered_design.shape[1]

    def transform(self, x_raw) -> np.ndarray:
        x = np.asarray(x_raw, dtype=float)
        if x.shape[-1] != self.p:
            raise DataError(f"expected {self.p} features, got {x.shape[-1]}")
        return (x - self.column_means) / self.column_sds

    def raw_prediction(self, centered_prediction):
        return centered_prediction + self.response_mean

    @classmethod
    def identity(cls, design, responses) -> "StandardizedDataset":
        """Wrap data as-is: no centering, no scaling."""
        X = np.asarray(design, dtype=float)
        return cls(X, np.asarray(responses, dtype=float), np.zeros(X.shape[1]),
                   np.ones(X.shape[1]), 0.0)


def standardize(raw_design, raw_responses, *, scale: bool = True) -> StandardizedDataset:
    """Center columns and responses; scale columns to unit sample sd.

    Constant columns are centered to zero, flagged, and keep sd 1.
    """
    X = np.asarray(raw_design, dtype=float)
    y = np.asarray(raw_responses, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError(f"design {X.shape} and responses {y.shape} disagree")
    if X.shape[0] < 2:
        raise DataError("standardize needs at least two rows")
    means = X.mean(axis=0)
    Xc = X - means
    sds = Xc.std(axis=0, ddof=1)
    constant = sds <= 1e-12 * np.maximum(1.0, np.abs(means))
    sds = np.where(constant, 1.0, sds)
    Xc[:, constant] = 0.0
    if not scale:
        sds = np.ones_like(sds)
    y_mean = float(y.mean())
    return StandardizedDataset(Xc / sds, y - y_mean, means, sds, y_mean, constant)


# ---------------------------------------------------------------------------
# CSV ingest
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable] = {
    "<=": operator.le, "<": operator.lt, ">=": operator.ge, ">": operator.gt,
    "==": operator.eq, "!=": operator.ne,
}


@dataclass(frozen=True)
class SplitRule:
    """Rows with ``row[column] <op> value`` go to train.

    ``column=None`` means a seeded random split with ``train_fraction``.
    """

    column: str | None = None
    op: str = "<="
    value: object = None
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.column is not None and self.op not in _OPS:
            raise DataError(f"unknown split operator {self.op!r}")

    def mask(self, frame: pd.DataFrame) -> np.ndarray:
        if self.column is None:
            n = len(frame)
            n_train = int(round(self.train_fraction * n))
            perm = rng_stream(self.seed, "csv-split").permutation(n)
            out = np.zeros(n, dtype=bool)
            out[perm[:n_train]] = True
            return out
        if self.column not in frame.columns:
            raise DataError(f"split column {self.column!r} not in CSV header")
        col = frame[self.column]
        value = self.value
        if pd.api.types.is_numeric_dtype(col) and isinstance(value, str):
            value = float(value)
        return np.asarray(_OPS[self.op](col, value), dtype=bool)

    @classmethod
    def from_mapping(cls, d: Mapping) -> "SplitRule":
        return cls(**{k: d[k] for k in ("column", "op", "value", "train_fraction", "seed") if k in d})


def load_csv(path, target_column: str, split_rule, drop_columns=()) -> tuple[ProblemInstance, ProblemInstance]:
    """Read a headered CSV and split rows into train/test instances.

    ``split_rule`` is a :class:`SplitRule` or any callable mapping the
    DataFrame to a boolean train mask.  A named split column is dropped from
    the covariates, as are ``drop_columns``.
    """
    try:
        frame = pd.read_csv(Path(path), encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if target_column not in frame.columns:
        raise DataError(f"target column {target_column!r} not in CSV header")
    if frame.isna().any().any():
        bad = frame.columns[frame.isna().any()].tolist()
        raise DataError(f"missing values in columns {bad}")
    if not pd.api.types.is_numeric_dtype(frame[target_column]):
        raise DataError(f"target column {target_column!r} is not numeric")

    mask = split_rule.mask(frame) if isinstance(split_rule, SplitRule) else np.asarray(split_rule(frame), dtype=bool)
    if mask.all() or not mask.any():
        raise DataError(f"split leaves an empty side (train={int(mask.sum())}, test={int((~mask).sum())})")

    dropped = {target_column, *drop_columns}
    if isinstance(split_rule, SplitRule) and split_rule.column is not None:
        dropped.add(split_rule.column)
    missing = dropped - set(frame.columns)
    if missing:
        raise DataError(f"columns {sorted(missing)} not in CSV header")
    covariates = [c for c in frame.columns if c not in dropped]
    non_numeric = [c for c in covariates if not pd.api.types.is_numeric_dtype(frame[c])]
    if non_numeric:
        raise DataError(f"non-numeric covariates {non_numeric}")

    X = frame[covariates].to_numpy(dtype=float)
    y = frame[target_column].to_numpy(dtype=float)
    return ProblemInstance(X[mask], y[mask]), ProblemInstance(X[~mask], y[~mask])


def spec_from_mapping(d: Mapping) -> SyntheticSpec:
    fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    return SyntheticSpec(**{k: v for k, v in d.items() if k in fields})
