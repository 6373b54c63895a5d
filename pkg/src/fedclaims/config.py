"""Experiment configuration: a TOML file validated into typed sections.

Validation errors carry ``path:line`` whenever the offending key can be
located in the source text.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datagen import PartitionSpec, TweedieParams, feature_names
from .errors import ConfigError

MODES = ("local", "hfl", "vfl")
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class DataSection:
    n: int
    p: int
    base_frequency: float
    frequency_coefficients: tuple[float, ...]
    severity_shape: float
    severity_scale: float
    test_fraction: float = 0.2
    standardize: bool = True
    dir: Path | None = None

    def tweedie(self, seed: int) -> TweedieParams:
        return TweedieParams(
            self.base_frequency, self.frequency_coefficients, self.severity_shape, self.severity_scale, seed
        )


@dataclass(frozen=True)
class CollaboratorEntry:
    id: int
    name: str
    fraction: float | None = None
    features: tuple[str, ...] | None = None
    labels: bool = False


@dataclass(frozen=True)
class PartitionSection:
    kind: str
    collaborators: tuple[CollaboratorEntry, ...]

    def spec(self) -> PartitionSpec:
        if self.kind == "horizontal":
            return PartitionSpec("horizontal", fractions=[c.fraction for c in self.collaborators])
        holder = next(k for k, c in enumerate(self.collaborators) if c.labels)
        return PartitionSpec("vertical", feature_sets=[c.features for c in self.collaborators], label_holder=holder)

    def label_holder(self) -> CollaboratorEntry:
        return next(c for c in self.collaborators if c.labels)


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (16,)
    activation: str = "relu"
    embedding_width: int = 8
    head_hidden: tuple[int, ...] = ()
    tail_hidden: tuple[int, ...] = (8,)


@dataclass(frozen=True)
class TrainingSection:
    batch_size: int
    learning_rate: float
    rounds: int = 1
    local_epochs: int = 1
    epochs: int = 1
    aggregation: str = "equal"


@dataclass(frozen=True)
class TransportSection:
    kind: str = "inproc"
    address: str = "127.0.0.1:7100"
    timeout: float = 60.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: Path
    data: DataSection
    partition: PartitionSection
    model: ModelSection
    training: TrainingSection
    transport: TransportSection = field(default_factory=TransportSection)
    source: Path | None = None

    def with_overrides(self, seed: int | None = None, output_dir=None) -> ExperimentConfig:
        cfg = self
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}")
            cfg = replace(cfg, seed=seed)
        if output_dir is not None:
            cfg = replace(cfg, output_dir=Path(output_dir))
        return cfg

    def local_epochs_total(self) -> int:
        """Epochs for the local baseline: matched to the federated run it is compared against."""
        if self.partition.kind == "horizontal":
            return self.training.rounds * self.training.local_epochs
        return self.training.epochs

    def check_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
        if mode == "hfl" and self.partition.kind != "horizontal":
            raise ConfigError("mode hfl needs a horizontal partition")
        if mode == "vfl" and self.partition.kind != "vertical":
            raise ConfigError("mode vfl needs a vertical partition")


# -- parsing -----------------------------------------------------------------


class _Locator:
    """Maps (table, index, key) to a line of the source text for diagnostics."""

    _header = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.]+)\s*\]\]?")
    _key = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")

    def __init__(self, path: Path, text: str):
        self.path = path
        self.lines = {}
        table, counts = "", {}
        for no, line in enumerate(text.splitlines(), 1):
            m = self._header.match(line)
            if m:
                name = m.group(2)
                if m.group(1) == "[[":
                    counts[name] = counts.get(name, -1) + 1
                    table = f"{name}[{counts[name]}]"
                else:
                    table = name
                self.lines.setdefault((table, None), no)
                continue
            m = self._key.match(line)
            if m:
                self.lines.setdefault((table, m.group(1)), no)

    def where(self, table: str, key: str | None = None) -> str:
        no = self.lines.get((table, key)) or self.lines.get((table, None))
        return f"{self.path}:{no}" if no else str(self.path)


class _Reader:
    def __init__(self, locator: _Locator, table: str, data: dict):
        self.loc, self.table, self.data = locator, table, data
        self.used: set[str] = set()

    def fail(self, key, message):
        where = self.loc.where(self.table, key)
        label = f"{self.table}.{key}" if self.table and key else (key or self.table or "config")
        raise ConfigError(f"{where}: {label}: {message}")

    def get(self, key, kind, default=..., check=None):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                self.fail(None, f"missing required key {key!r}")
            return default
        value = self.data[key]
        try:
            value = _coerce(value, kind)
        except (TypeError, ValueError) as exc:
            self.fail(key, str(exc))
        if check is not None:
            message = check(value)
            if message:
                self.fail(key, message)
        return value

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            self.fail(extra[0], f"unknown key {extra[0]!r}")


def _coerce(value, kind):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ValueError(f"expected a finite number, got {value!r}")
        return float(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise TypeError(f"expected true or false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        return value
    if kind is dict:
        if not isinstance(value, dict):
            raise TypeError(f"expected a table, got {value!r}")
        return value
    if isinstance(kind, tuple):  # ("list", element kind)
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {value!r}")
        return tuple(_coerce(v, kind[1]) for v in value)
    raise AssertionError(kind)


def _positive(v):
    return None if v > 0 else "must be positive"


def _widths(v):
    return None if all(w > 0 for w in v) else "layer widths must be positive"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path, text)


def parse_config(raw: dict, path="<config>", text: str = "") -> ExperimentConfig:
    path = Path(path)
    loc = _Locator(path, text)
    top = _Reader(loc, "", raw)
    seed = top.get("seed", int, 0, lambda v: None if 0 <= v < 2**64 else "must be an unsigned 64-bit integer")
    output_dir = Path(top.get("output_dir", str, "runs"))
    if not output_dir.is_absolute():
        output_dir = path.parent / output_dir
    sections = {}
    for name in ("data", "partition", "model", "training", "transport"):
        top.used.add(name)
        value = raw.get(name, {})
        if not isinstance(value, dict):
            top.fail(name, "must be a table")
        sections[name] = value
    top.finish()

    data = _data_section(_Reader(loc, "data", sections["data"]), path)
    partition = _partition_section(loc, sections["partition"], data)
    model = _model_section(_Reader(loc, "model", sections["model"]))
    training = _training_section(_Reader(loc, "training", sections["training"]))
    transport = _transport_section(_Reader(loc, "transport", sections["transport"]))
    return ExperimentConfig(seed, output_dir, data, partition, model, training, transport, path)


def _data_section(r: _Reader, path: Path) -> DataSection:
    n = r.get("n", int, check=_positive)
    p = r.get("p", int, check=_positive)
    lam = r.get("base_frequency", float, check=_positive)
    beta = r.get("frequency_coefficients", ("list", float), (0.0,) * p)
    if len(beta) != p:
        r.fail("frequency_coefficients", f"has {len(beta)} entries but p = {p}")
    shape = r.get("severity_shape", float, check=_positive)
    scale = r.get("severity_scale", float, check=_positive)
    test_fraction = r.get("test_fraction", float, 0.2, lambda v: None if 0 < v < 1 else "must lie in (0, 1)")
    standardize = r.get("standardize", bool, True)
    data_dir = r.get("dir", str, None)
    r.finish()
    if data_dir is not None:
        data_dir = Path(data_dir)
        if not data_dir.is_absolute():
            data_dir = path.parent / data_dir
    return DataSection(n, p, lam, beta, shape, scale, test_fraction, standardize, data_dir)


def _partition_section(loc: _Locator, raw: dict, data: DataSection) -> PartitionSection:
    r = _Reader(loc, "partition", raw)
    kind = r.get("kind", str, check=lambda v: None if v in ("horizontal", "vertical") else
                 "must be 'horizontal' or 'vertical'")
    entries = r.get("collaborators", ("list", dict), ())
    if not entries:
        r.fail(None, "needs at least one [[partition.collaborators]] entry")
    r.finish()
    names = set(feature_names(data.p))
    out, seen_ids, seen_names, owner = [], set(), set(), {}
    for k, entry in enumerate(entries):
        c = _Reader(loc, f"partition.collaborators[{k}]", entry)
        cid = c.get("id", int, check=lambda v: None if 1 <= v < 2**16 else "must be in 1..65535")
        if cid in seen_ids:
            c.fail("id", f"duplicate collaborator id {cid}")
        name = c.get("name", str, chr(ord("A") + k) if k < 26 else str(cid))
        if not re.fullmatch(r"[A-Za-z0-9_-]+", name) or name in seen_names:
            c.fail("name", f"names must be unique and use letters, digits, '_' or '-', got {name!r}")
        seen_ids.add(cid)
        seen_names.add(name)
        if kind == "horizontal":
            fraction = c.get("fraction", float, check=lambda v: None if 0 < v <= 1 else "must lie in (0, 1]")
            c.finish()
            out.append(CollaboratorEntry(cid, name, fraction=fraction))
        else:
            feats = c.get("features", ("list", str), ())
            for f in feats:
                if f not in names:
                    c.fail("features", f"unknown feature {f!r} (generated features are x1..x{data.p})")
                if f in owner:
                    c.fail("features", f"feature {f!r} is already assigned to collaborator {owner[f]}")
                owner[f] = name
            labels = c.get("labels", bool, False)
            c.finish()
            out.append(CollaboratorEntry(cid, name, features=feats, labels=labels))
    if kind == "horizontal":
        total = math.fsum(c.fraction for c in out)
        if abs(total - 1.0) > 1e-9:
            r.fail("collaborators", f"fractions sum to {total}, not 1")
    else:
        missing = sorted(names - set(owner), key=lambda f: int(f[1:]))
        if missing:
            r.fail("collaborators", f"features {missing} are not assigned to anyone")
        holders = [c.name for c in out if c.labels]
        if len(holders) != 1:
            r.fail("collaborators", f"exactly one collaborator must set labels = true, found {holders}")
    return PartitionSection(kind, tuple(out))


def _model_section(r: _Reader) -> ModelSection:
    m = ModelSection(
        hidden=r.get("hidden", ("list", int), (16,), _widths),
        activation=r.get("activation", str, "relu",
                         lambda v: None if v in ACTIVATIONS else f"must be one of {ACTIVATIONS}"),
        embedding_width=r.get("embedding_width", int, 8, _positive),
        head_hidden=r.get("head_hidden", ("list", int), (), _widths),
        tail_hidden=r.get("tail_hidden", ("list", int), (8,), _widths),
    )
    r.finish()
    return m


def _training_section(r: _Reader) -> TrainingSection:
    t = TrainingSection(
        batch_size=r.get("batch_size", int, check=_positive),
        learning_rate=r.get("learning_rate", float, check=_positive),
        rounds=r.get("rounds", int, 1, _positive),
        local_epochs=r.get("local_epochs", int, 1, _positive),
        epochs=r.get("epochs", int, 1, _positive),
        aggregation=r.get("aggregation", str, "equal",
                          lambda v: None if v in ("equal", "sample_size") else "must be 'equal' or 'sample_size'"),
    )
    r.finish()
    return t


def _transport_section(r: _Reader) -> TransportSection:
    t = TransportSection(
        kind=r.get("kind", str, "inproc", lambda v: None if v in ("inproc", "socket") else
                   "must be 'inproc' or 'socket'"),
        address=r.get("address", str, "127.0.0.1:7100"),
        timeout=r.get("timeout", float, 60.0, _positive),
    )
    r.finish()
    return t
