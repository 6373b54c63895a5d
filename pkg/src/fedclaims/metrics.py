"""Portfolio-level evaluation and local-vs-federated comparison tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, ReportError, ShapeError, UndefinedDenominatorError

SPLITS = ("train", "test")
MODES = ("local", "hfl", "vfl")


def percentage_error(y, y_hat) -> float:
    """Signed portfolio error: sum(y - y_hat) / sum(y).

    Positive when the portfolio total is under-predicted.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise InputError("percentage error needs at least one observation")
    if y.shape != y_hat.shape:
        raise ShapeError(f"{y.size} labels vs {y_hat.size} predictions")
    total = math.fsum(y)
    if total == 0.0:
        raise UndefinedDenominatorError("labels sum to zero; percentage error is undefined")
    return math.fsum(y - y_hat) / total


def mean_squared_error(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise InputError("mse needs at least one observation")
    if y.shape != y_hat.shape:
        raise ShapeError(f"{y.size} labels vs {y_hat.size} predictions")
    d = y - y_hat
    return math.fsum(d * d) / y.size


@dataclass(frozen=True)
class EvaluationRow:
    collaborator: str
    split: str
    mode: str
    pe: float
    mse: float
    n: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.collaborator, self.split)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate_predictions(collaborator, split, mode, y, y_hat) -> EvaluationRow:
    if split not in SPLITS or mode not in MODES:
        raise InputError(f"unknown split/mode {split!r}/{mode!r}")
    return EvaluationRow(
        str(collaborator), split, mode,
        percentage_error(y, y_hat), mean_squared_error(y, y_hat), int(np.size(y)),
    )


def evaluate(params, dataset, collaborator, split, mode, batch_size: int = 4096) -> EvaluationRow:
    """Forward the whole labelled dataset through ``params`` in batches."""
    from .nncore import predict

    if not dataset.has_labels:
        raise InputError("evaluation needs a labelled dataset")
    if dataset.p != params.input_width:
        raise ShapeError(f"model expects {params.input_width} features, dataset has {dataset.p}")
    y_hat = predict(params, dataset.features, batch_size=batch_size)
    return evaluate_predictions(collaborator, split, mode, dataset.labels, y_hat)


class EvaluationReport:
    def __init__(self, rows: Iterable[EvaluationRow] = ()):
        self.rows: list[EvaluationRow] = []
        for r in rows:
            self.add(r)

    def add(self, row: EvaluationRow) -> None:
        if any((r.collaborator, r.split, r.mode) == (row.collaborator, row.split, row.mode) for r in self.rows):
            raise ReportError(f"duplicate report row {row.collaborator}/{row.split}/{row.mode}")
        self.rows.append(row)

    def extend(self, rows: Iterable[EvaluationRow]) -> None:
        for r in rows:
            self.add(r)

    def by_mode(self, mode: str) -> list[EvaluationRow]:
        return [r for r in self.rows if r.mode == mode]

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.rows)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> EvaluationReport:
        rows = []
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                rows.append(EvaluationRow(**data))
            except (ValueError, TypeError) as exc:
                raise ReportError(f"{path}:{line_no}: not an evaluation row ({exc})") from None
        return cls(rows)


def _fmt_pe(v: float) -> str:
    return f"{v:.2f}"


def comparison_report(
    local_rows: Sequence[EvaluationRow],
    federated_rows: Sequence[EvaluationRow],
    entity: str = "Collaborator",
) -> str:
    """Render a Collaborator / Split / Mode / PE table.

    Row groups are labelled ``"<entity> <collaborator>"`` (for example
    "Collaborator A" or "Company A").
    A ``*`` marks the entry with the smaller |PE| in each (collaborator,
    split) pair; exact ties mark neither.
    """
    local = {r.key: r for r in local_rows}
    fed = {r.key: r for r in federated_rows}
    missing_local = sorted(set(fed) - set(local))
    missing_fed = sorted(set(local) - set(fed))
    if missing_local or missing_fed:
        parts = []
        if missing_local:
            parts.append("no local baseline for " + ", ".join(f"{c}/{s}" for c, s in missing_local))
        if missing_fed:
            parts.append("no federated result for " + ", ".join(f"{c}/{s}" for c, s in missing_fed))
        raise ReportError("; ".join(parts))
    if not local:
        raise ReportError("nothing to compare")

    collaborators = list(dict.fromkeys(k[0] for k in local))
    lines = []
    header = ("Collaborator", "Split", "Mode", "PE")
    body = []
    for c in collaborators:
        name = f"{entity} {c}"
        for s in SPLITS:
            if (c, s) not in local:
                continue
            lo, fe = local[(c, s)], fed[(c, s)]
            flag_lo = abs(lo.pe) < abs(fe.pe)
            flag_fe = abs(fe.pe) < abs(lo.pe)
            body.append((name, s.capitalize(), "Local", _fmt_pe(lo.pe), flag_lo))
            name = ""
            body.append(("", "", fe.mode.upper(), _fmt_pe(fe.pe), flag_fe))
        body.append(None)

    w0 = max(len(header[0]), *(len(r[0]) for r in body if r))
    rule = "-" * (w0 + 24)
    lines.append(f"{header[0]:<{w0}}  {'Split':<5}  {'Mode':<5}  {'PE':>6}")
    lines.append(rule)
    prev_split = None
    for r in body:
        if r is None:
            lines.append(rule)
            prev_split = None
            continue
        name, split, mode, pe, flag = r
        split_cell = split if split != prev_split else ""
        prev_split = split or prev_split
        lines.append(f"{name:<{w0}}  {split_cell:<5}  {mode:<5}  {pe:>6}{' *' if flag else ''}".rstrip())
    return "\n".join(lines) + "\n"
