"""Synthetic compound Poisson-Gamma claims data, CSV I/O and partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IngestionError, ShapeError
from .rng import Stream

LAMBDA_CAP = 1e3
LOSS_COLUMN = "loss"
ID_COLUMN = "entity_id"


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Entity-keyed ``n x p`` feature matrix with optional nonnegative losses."""

    entity_ids: np.ndarray
    features: np.ndarray
    feature_names: tuple[str, ...]
    labels: np.ndarray | None = None

    def __post_init__(self):
        ids = _readonly(self.entity_ids, np.uint64).reshape(-1)
        names = tuple(str(f) for f in self.feature_names)
        x = _readonly(self.features, np.float64)
        if x.size == 0:
            x = _readonly(np.zeros((ids.size, len(names))), np.float64)
        if x.ndim != 2 or x.shape != (ids.size, len(names)):
            raise ShapeError(
                f"features {x.shape} inconsistent with {ids.size} ids and {len(names)} names"
            )
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate feature names in {names}")
        if np.unique(ids).size != ids.size:
            raise ConfigError("entity_ids must be unique")
        object.__setattr__(self, "entity_ids", ids)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "feature_names", names)
        if self.labels is not None:
            y = _readonly(self.labels, np.float64).reshape(-1)
            if y.size != ids.size:
                raise ShapeError(f"{y.size} labels for {ids.size} rows")
            if np.any(y < 0):
                raise ConfigError("losses must be nonnegative")
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.entity_ids.size

    @property
    def p(self) -> int:
        return len(self.feature_names)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def take(self, rows) -> TabularDataset:
        rows = np.asarray(rows, dtype=np.int64)
        return TabularDataset(
            self.entity_ids[rows],
            self.features[rows],
            self.feature_names,
            None if self.labels is None else self.labels[rows],
        )

    def select(self, names: Sequence[str], keep_labels: bool) -> TabularDataset:
        index = {f: i for i, f in enumerate(self.feature_names)}
        cols = [index[f] for f in names]
        return TabularDataset(
            self.entity_ids,
            self.features[:, cols],
            tuple(names),
            self.labels if keep_labels else None,
        )

    def without_labels(self) -> TabularDataset:
        return TabularDataset(self.entity_ids, self.features, self.feature_names, None)

    def equals(self, other: TabularDataset) -> bool:
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.entity_ids, other.entity_ids)
            and self.features.tobytes() == other.features.tobytes()
            and (self.labels is None or self.labels.tobytes() == other.labels.tobytes())
        )


@dataclass(frozen=True)
class TweedieParams:
    """Frequency/severity parameters: N ~ Poisson(base * exp(x.beta)), Y ~ Gamma(shape, scale)."""

    base_frequency: float
    frequency_coefficients: tuple[float, ...]
    severity_shape: float
    severity_scale: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "frequency_coefficients", tuple(float(c) for c in self.frequency_coefficients)
        )
        for name in ("base_frequency", "severity_shape", "severity_scale"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        if not all(math.isfinite(c) for c in self.frequency_coefficients):
            raise ConfigError("frequency_coefficients must be finite")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def expected_loss_at_zero(self) -> float:
        return self.base_frequency * self.severity_shape * self.severity_scale


def feature_names(p: int) -> tuple[str, ...]:
    return tuple(f"x{j + 1}" for j in range(p))


def generate_tweedie(n: int, p: int, params: TweedieParams) -> TabularDataset:
    """Draw ``n`` policyholders with ``p`` standard-normal rating factors.

    Per row: rate = min(base * exp(x . beta), 1e3); count ~ Poisson(rate);
    loss = sum of ``count`` i.i.d. Gamma(shape, scale) severities.
    Entity ids run 1..n.
    """
    if n < 0 or p < 1:
        raise ConfigError(f"need n >= 0 and p >= 1, got n={n}, p={p}")
    beta = np.asarray(params.frequency_coefficients, dtype=np.float64)
    if beta.size != p:
        raise ConfigError(f"{beta.size} frequency coefficients for {p} features")
    stream = Stream(params.seed)
    x = stream.normal(n * p).reshape(n, p)
    rate = np.minimum(params.base_frequency * np.exp(x @ beta), LAMBDA_CAP)
    counts = stream.poisson(rate)
    severities = stream.gamma(params.severity_shape, params.severity_scale, int(counts.sum()))
    owner = np.repeat(np.arange(n), counts)
    losses = np.bincount(owner, weights=severities, minlength=n) if n else np.empty(0)
    ids = np.arange(1, n + 1, dtype=np.uint64)
    return TabularDataset(ids, x, feature_names(p), losses)


@dataclass(frozen=True)
class PartitionSpec:
    """Horizontal row fractions, or vertical feature subsets with one label holder."""

    kind: str
    fractions: tuple[float, ...] = ()
    feature_sets: tuple[tuple[str, ...], ...] = ()
    label_holder: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "feature_sets", tuple(tuple(s) for s in self.feature_sets))
        if self.kind == "horizontal":
            if not self.fractions:
                raise ConfigError("horizontal partition needs at least one fraction")
            if any(not (0 < f <= 1) for f in self.fractions):
                raise ConfigError(f"fractions must lie in (0, 1], got {self.fractions}")
            if abs(math.fsum(self.fractions) - 1.0) > 1e-9:
                raise ConfigError(f"fractions must sum to 1, got {math.fsum(self.fractions)}")
        elif self.kind == "vertical":
            if not self.feature_sets:
                raise ConfigError("vertical partition needs at least one feature subset")
            seen = {}
            for k, subset in enumerate(self.feature_sets):
                for f in subset:
                    if f in seen:
                        raise ConfigError(
                            f"feature {f!r} assigned to both collaborator {seen[f]} and {k}"
                        )
                    seen[f] = k
            if not 0 <= self.label_holder < len(self.feature_sets):
                raise ConfigError(f"label holder index {self.label_holder} out of range")
        else:
            raise ConfigError(f"partition kind must be horizontal or vertical, got {self.kind!r}")


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    bounds = [0]
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        bounds.append(min(n, int(round(acc * n))))
    bounds.append(n)
    return [b - a for a, b in zip(bounds[:-1], bounds[1:])]


def horizontal_split(ds: TabularDataset, spec: PartitionSpec, seed: int) -> list[TabularDataset]:
    if spec.kind != "horizontal":
        raise ConfigError("horizontal_split needs a horizontal PartitionSpec")
    order = Stream(seed).permutation(ds.n)
    out, start = [], 0
    for size in split_sizes(ds.n, spec.fractions):
        out.append(ds.take(order[start : start + size]))
        start += size
    return out


def vertical_split(ds: TabularDataset, spec: PartitionSpec) -> list[TabularDataset]:
    if spec.kind != "vertical":
        raise ConfigError("vertical_split needs a vertical PartitionSpec")
    assigned = [f for subset in spec.feature_sets for f in subset]
    missing = sorted(set(ds.feature_names) - set(assigned))
    unknown = sorted(set(assigned) - set(ds.feature_names))
    if missing or unknown:
        raise ConfigError(f"feature subsets must cover the dataset: missing {missing}, unknown {unknown}")
    if spec.label_holder is not None and not ds.has_labels:
        raise ConfigError("the dataset has no labels to give the label holder")
    return [
        ds.select(subset, keep_labels=(k == spec.label_holder))
        for k, subset in enumerate(spec.feature_sets)
    ]


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray = field(repr=False)

    def apply(self, ds: TabularDataset) -> TabularDataset:
        if ds.feature_names != self.feature_names:
            raise ConfigError(
                f"feature names {ds.feature_names} do not match fitted {self.feature_names}"
            )
        x = (ds.features - self.mean) / self.scale
        return TabularDataset(ds.entity_ids, x, ds.feature_names, ds.labels)

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }


def fit_standardization(train: TabularDataset) -> StandardizationStats:
    """Population mean and standard deviation per column; zero-spread columns keep scale 1."""
    if train.n == 0:
        mean = np.zeros(train.p)
        std = np.ones(train.p)
    else:
        mean = train.features.mean(axis=0)
        std = train.features.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return StandardizationStats(train.feature_names, mean, scale)


def standardize(train: TabularDataset, others: Sequence[TabularDataset] = ()):
    """Standardize ``train`` and ``others`` with statistics from ``train`` alone.

    Returns ``(train_std, [others_std...], stats)``.
    """
    stats = fit_standardization(train)
    return stats.apply(train), [stats.apply(o) for o in others], stats


# -- CSV ---------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(ds: TabularDataset, path) -> None:
    path = Path(path)
    header = [ID_COLUMN, *ds.feature_names] + ([LOSS_COLUMN] if ds.has_labels else [])
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n):
            row = [str(int(ds.entity_ids[i]))] + [_fmt(v) for v in ds.features[i]]
            if ds.has_labels:
                row.append(_fmt(ds.labels[i]))
            writer.writerow(row)


def load_csv(path) -> TabularDataset:
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header row") from None
        if not header or header[0] != ID_COLUMN:
            raise IngestionError(f"{path}: first column must be {ID_COLUMN!r}")
        has_loss = header[-1] == LOSS_COLUMN
        names = header[1:-1] if has_loss else header[1:]
        if not names:
            raise IngestionError(f"{path}: no feature columns")
        if len(set(names)) != len(names) or LOSS_COLUMN in names or ID_COLUMN in names:
            raise IngestionError(f"{path}: duplicate or reserved column names in header")

        ids, rows, losses = [], [], []
        seen = {}
        for line_no, record in enumerate(reader, start=2):
            if len(record) != len(header):
                raise IngestionError(
                    f"{path}:{line_no}: expected {len(header)} columns, found {len(record)}"
                )
            try:
                eid = int(record[0])
                if eid < 0 or eid >= 2**64:
                    raise ValueError
            except ValueError:
                raise IngestionError(
                    f"{path}:{line_no}: column {ID_COLUMN!r}: not an unsigned integer: {record[0]!r}"
                ) from None
            if eid in seen:
                raise IngestionError(
                    f"{path}:{line_no}: duplicate entity_id {eid} (first seen on line {seen[eid]})"
                )
            seen[eid] = line_no
            values = []
            for col, cell in zip(header[1:], record[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise IngestionError(
                        f"{path}:{line_no}: column {col!r}: unparsable value {cell!r}"
                    )
                values.append(v)
            if has_loss:
                if values[-1] < 0:
                    raise IngestionError(f"{path}:{line_no}: column 'loss': negative loss {values[-1]}")
                losses.append(values.pop())
            ids.append(eid)
            rows.append(values)

    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return TabularDataset(
        np.array(ids, dtype=np.uint64),
        features,
        tuple(names),
        np.array(losses) if has_loss else None,
    )
