"""Config-driven experiments: data preparation, local/HFL/VFL runs, and single-role serving.

Everything here is deterministic in ``(config, seed)``. Wall-clock times go
only to the ``run.log`` sidecar so that history, report and model files can
be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import hfl, nncore, vfl
from .config import ExperimentConfig
from .datagen import (
    PartitionSpec,
    TabularDataset,
    generate_tweedie,
    horizontal_split,
    load_csv,
    save_csv,
    standardize,
    vertical_split,
)
from .errors import ConfigError, IngestionError
from .metrics import EvaluationReport, EvaluationRow, evaluate
from .modelio import save_model
from .nncore import NetworkConfig, NetworkParams
from .rng import derive_seed
from .transport import channels
from .transport.codec import PROTOCOL_VERSION

# stream tags keep the seeds of independent steps apart
_DATA, _PARTITION, _TEST_SPLIT, _NETWORK = 1, 2, 3, 4


@dataclass
class Split:
    """One collaborator's train/test pair."""

    id: int
    name: str
    train: TabularDataset
    test: TabularDataset


# -- data --------------------------------------------------------------------


def build_splits(cfg: ExperimentConfig) -> list[Split]:
    """Generate the synthetic dataset and cut it into per-collaborator train/test sets."""
    d = cfg.data
    ds = generate_tweedie(d.n, d.p, d.tweedie(derive_seed(cfg.seed, _DATA)))
    spec = cfg.partition.spec()
    tf = d.test_fraction
    row_split = PartitionSpec("horizontal", fractions=[1.0 - tf, tf])
    out = []
    if cfg.partition.kind == "horizontal":
        parts = horizontal_split(ds, spec, derive_seed(cfg.seed, _PARTITION))
        for entry, part in zip(cfg.partition.collaborators, parts):
            train, test = horizontal_split(part, row_split, derive_seed(cfg.seed, _TEST_SPLIT, entry.id))
            out.append(Split(entry.id, entry.name, train, test))
    else:
        train, test = horizontal_split(ds, row_split, derive_seed(cfg.seed, _TEST_SPLIT, 0))
        for entry, tr, te in zip(cfg.partition.collaborators, vertical_split(train, spec), vertical_split(test, spec)):
            out.append(Split(entry.id, entry.name, tr, te))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.data.dir if cfg.data.dir is not None else cfg.output_dir / "data"


def generate(cfg: ExperimentConfig) -> Path:
    """Write ``<name>_train.csv`` / ``<name>_test.csv`` per collaborator and a manifest."""
    out = data_dir(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    splits = build_splits(cfg)
    files = {}
    for s in splits:
        for kind, ds in (("train", s.train), ("test", s.test)):
            path = out / f"{s.name}_{kind}.csv"
            try:
                save_csv(ds, path)
            except OSError as exc:
                raise ConfigError(f"cannot write {path}: {exc.strerror or exc}") from None
            files[path.name] = {"rows": ds.n, "columns": list(ds.feature_names), "labels": ds.has_labels,
                                "sha256": _sha256(path)}
    manifest = {
        "seed": cfg.seed,
        "seeds": {
            "data": derive_seed(cfg.seed, _DATA),
            "partition": derive_seed(cfg.seed, _PARTITION),
            "test_split": {s.name: derive_seed(cfg.seed, _TEST_SPLIT, s.id if cfg.partition.kind == "horizontal" else 0)
                           for s in splits},
        },
        "n": cfg.data.n,
        "partition": cfg.partition.kind,
        "collaborators": [
            {"id": s.id, "name": s.name, "train_rows": s.train.n, "test_rows": s.test.n,
             "rows": s.train.n + s.test.n if cfg.partition.kind == "horizontal" else cfg.data.n}
            for s in splits
        ],
        "files": files,
        "standardization": _standardization_stats(splits) if cfg.data.standardize else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _standardization_stats(splits):
    return {s.name: standardize(s.train)[2].to_dict() for s in splits if s.train.p}


def load_splits(cfg: ExperimentConfig) -> list[Split]:
    """Read previously generated CSVs from ``data.dir`` and check them against the config."""
    src = cfg.data.dir
    out = []
    for entry in cfg.partition.collaborators:
        pair = []
        for kind in ("train", "test"):
            ds = load_csv(src / f"{entry.name}_{kind}.csv")
            want = entry.features if cfg.partition.kind == "vertical" else None
            if want is not None and ds.feature_names != tuple(want):
                raise IngestionError(f"{src / f'{entry.name}_{kind}.csv'}: columns {ds.feature_names} != {want}")
            pair.append(ds)
        out.append(Split(entry.id, entry.name, *pair))
    if cfg.partition.kind == "horizontal":
        names = out[0].train.feature_names
        for s in out:
            if s.train.feature_names != names or s.test.feature_names != names:
                raise IngestionError(f"collaborator {s.name} columns differ from {out[0].name}")
    return out


def prepare(cfg: ExperimentConfig) -> list[Split]:
    """Per-collaborator splits, standardized with each collaborator's own train statistics."""
    splits = load_splits(cfg) if cfg.data.dir is not None else build_splits(cfg)
    if not cfg.data.standardize:
        return splits
    out = []
    for s in splits:
        if s.train.p == 0:
            out.append(s)
            continue
        train, (test,), _ = standardize(s.train, [s.test])
        out.append(Split(s.id, s.name, train, test))
    return out


# -- runs --------------------------------------------------------------------


@dataclass
class RunResult:
    mode: str
    history: list[str]
    rows: list[EvaluationRow]
    models: dict[str, tuple[NetworkParams, int]] = field(default_factory=dict)


def network_config(cfg: ExperimentConfig, p: int) -> NetworkConfig:
    m = cfg.model
    return NetworkConfig([p, *m.hidden, 1], [m.activation] * len(m.hidden), seed=derive_seed(cfg.seed, _NETWORK))


def architecture(cfg: ExperimentConfig, widths: dict[int, int]) -> vfl.SplitArchitecture:
    m = cfg.model
    return vfl.default_architecture(widths, cfg.seed, m.embedding_width, m.head_hidden, m.tail_hidden,
                                    m.activation)


def _rows(params, s: Split, mode):
    return [evaluate(params, s.train, s.name, "train", mode), evaluate(params, s.test, s.name, "test", mode)]


def run_local(cfg: ExperimentConfig, splits: list[Split]) -> RunResult:
    """Each collaborator trains alone; for vertical data only the label holder can."""
    t = cfg.training
    epochs = cfg.local_epochs_total()
    if cfg.partition.kind == "vertical":
        holder = _by_id(splits, cfg.partition.label_holder().id)
        if holder.train.p == 0:
            raise ConfigError("the label holder has no features of its own, so there is no local baseline")
        plan = vfl.VflPlan([vfl.VflWorkerSpec(holder.id, holder.train, holder.test)],
                           architecture(cfg, {holder.id: holder.train.p}), epochs, t.batch_size,
                           t.learning_rate, cfg.seed)
        res = vfl.run_vfl(plan, timeout=cfg.transport.timeout)
        history = [json.dumps({"collaborator": holder.name, **json.loads(r.to_json())}, sort_keys=True)
                   for r in res.history]
        rows = [EvaluationRow(r.collaborator, r.split, "local", r.pe, r.mse, r.n)
                for r in res.evaluation_rows(holder.name, plan.workers[0])]
        models = _vfl_models(cfg, plan, res, {holder.id: holder.name})
        return RunResult("local", history, rows, models)

    net = network_config(cfg, splits[0].train.p)
    history, rows, models = [], [], {}
    for s in splits:
        params = nncore.init_network(net)
        base = hfl.collaborator_seed(cfg.seed, s.id)
        for e in range(1, epochs + 1):
            params, loss = hfl.local_epoch_with_loss(params, s.train, t.batch_size, t.learning_rate,
                                                     hfl.epoch_seed(base, e))
            history.append(json.dumps({"collaborator": s.name, "epoch": e, "train_mse": loss,
                                       "checksum": params.checksum()}, sort_keys=True))
        rows += _rows(params, s, "local")
        models[f"model_{s.name}.fcm"] = (params, net.seed)
    return RunResult("local", history, rows, models)


def hfl_plan(cfg: ExperimentConfig, splits: list[Split]) -> hfl.HflPlan:
    t = cfg.training
    return hfl.HflPlan(
        [hfl.HflCollaboratorSpec(s.id, s.train, s.test) for s in splits],
        network_config(cfg, splits[0].train.p), t.rounds, t.batch_size, t.learning_rate,
        t.local_epochs, t.aggregation, cfg.seed,
    )


def run_hfl(cfg: ExperimentConfig, splits: list[Split]) -> RunResult:
    plan = hfl_plan(cfg, splits)
    res = hfl.run_hfl(plan, cfg.transport.kind, cfg.transport.timeout)
    rows = [r for s in splits for r in _rows(res.params, s, "hfl")]
    return RunResult("hfl", [r.to_json() for r in res.records], rows,
                     {"model_global.fcm": (res.params, plan.network.seed)})


def vfl_plan(cfg: ExperimentConfig, splits: list[Split]) -> vfl.VflPlan:
    t = cfg.training
    return vfl.VflPlan(
        [vfl.VflWorkerSpec(s.id, s.train, s.test) for s in splits],
        architecture(cfg, {s.id: s.train.p for s in splits}), t.epochs, t.batch_size, t.learning_rate, cfg.seed,
    )


def _vfl_models(cfg, plan, res, names):
    models = {}
    for wid, head in res.heads.items():
        if head is not None:
            models[f"model_{names[wid]}_head.fcm"] = (head, plan.architecture.head_configs[wid].seed)
    models["model_tail.fcm"] = (res.tail, plan.architecture.tail_config.seed)
    return models


def run_vfl(cfg: ExperimentConfig, splits: list[Split]) -> RunResult:
    plan = vfl_plan(cfg, splits)
    res = vfl.run_vfl(plan, cfg.transport.kind, cfg.transport.timeout)
    holder = _by_id(splits, res.label_holder)
    rows = res.evaluation_rows(holder.name, plan.label_holder())
    return RunResult("vfl", [r.to_json() for r in res.history], rows,
                     _vfl_models(cfg, plan, res, {s.id: s.name for s in splits}))


def _by_id(splits, cid):
    return next(s for s in splits if s.id == cid)


RUNNERS = {"local": run_local, "hfl": run_hfl, "vfl": run_vfl}


def run_dir(cfg: ExperimentConfig, mode: str) -> Path:
    return cfg.output_dir / mode


def write_result(out: Path, result: RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.jsonl").write_text("".join(line + "\n" for line in result.history), encoding="utf-8")
    EvaluationReport(result.rows).write(out / "report.jsonl")
    for name, (params, seed) in result.models.items():
        save_model(out / name, params, seed)


class Sidecar:
    """Timestamped event log kept apart from the deterministic artifacts."""

    def __init__(self, path: Path):
        self.path = path
        self.t0 = time.monotonic()
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("a", encoding="utf-8")

    def event(self, name: str, **fields) -> None:
        record = {"time": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "elapsed_s": round(time.monotonic() - self.t0, 3),
                  "event": name, **fields}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run(cfg: ExperimentConfig, mode: str) -> tuple[Path, RunResult]:
    cfg.check_mode(mode)
    out = run_dir(cfg, mode)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    log = Sidecar(out / "run.log")
    log.event("start", mode=mode, seed=cfg.seed, config=str(cfg.source), transport=cfg.transport.kind)
    try:
        result = RUNNERS[mode](cfg, prepare(cfg))
        write_result(out, result)
        log.event("finish", rows=len(result.rows))
        return out, result
    except BaseException as exc:
        log.event("error", error=type(exc).__name__, message=str(exc))
        raise
    finally:
        log.close()


# -- single-role serving -------------------------------------------------------


def _append(path: Path):
    def write(record):
        with path.open("a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
    return write


def serve(cfg: ExperimentConfig, role: str, role_id: int | None = None, protocol_version: int | None = None,
          ready=None) -> Path:
    """Run one protocol role in this process over TCP.

    ``ready(address)`` is called once a listening role is accepting
    connections (used to learn an ephemeral port).
    """
    if cfg.transport.kind != "socket":
        raise ConfigError("serve needs transport.kind = 'socket'")
    horizontal = cfg.partition.kind == "horizontal"
    if role in ("aggregator", "collaborator") and not horizontal:
        raise ConfigError(f"role {role} needs a horizontal partition")
    if role in ("label-worker", "feature-worker") and horizontal:
        raise ConfigError(f"role {role} needs a vertical partition")
    ids = [c.id for c in cfg.partition.collaborators]
    if role in ("collaborator", "feature-worker") and role_id not in ids:
        raise ConfigError(f"{role} id must be one of {ids}, got {role_id}")
    if role == "feature-worker" and role_id == cfg.partition.label_holder().id:
        raise ConfigError(f"collaborator {role_id} holds the labels; serve it as label-worker")
    mode = "hfl" if horizontal else "vfl"
    out = run_dir(cfg, mode)
    out.mkdir(parents=True, exist_ok=True)
    timeout = cfg.transport.timeout
    version = protocol_version if protocol_version is not None else PROTOCOL_VERSION
    log = Sidecar(out / f"serve-{role}{'' if role_id is None else f'-{role_id}'}.log")
    log.event("start", role=role, id=role_id, address=cfg.transport.address)
    try:
        if role == "aggregator":
            _serve_aggregator(cfg, out, timeout, ready)
        elif role == "label-worker":
            _serve_label_worker(cfg, out, timeout, ready)
        else:
            splits = prepare(cfg)
            me = _by_id(splits, role_id)
            ep = channels.dial(cfg.transport.address, timeout)
            with ep:
                if role == "collaborator":
                    plan = hfl_plan(cfg, splits)
                    worker = hfl.HflCollaborator(
                        me.id, me.train, ep, plan.network, plan.batch_size, plan.learning_rate,
                        plan.local_epochs_per_round, hfl.collaborator_seed(cfg.seed, me.id), timeout, version,
                    )
                    final = worker.run()
                    EvaluationReport(_rows(final, me, "hfl")).write(out / f"report_{me.name}.jsonl")
                else:
                    arch = architecture(cfg, {s.id: s.train.p for s in splits})
                    t = cfg.training
                    worker = vfl.FeatureWorker(
                        me.id, me.train, arch.head_configs[me.id], ep, t.epochs, t.batch_size,
                        t.learning_rate, cfg.seed, me.test, timeout, version,
                    )
                    head = worker.run()
                    save_model(out / f"model_{me.name}_head.fcm", head, arch.head_configs[me.id].seed)
        log.event("finish")
    except BaseException as exc:
        log.event("error", error=type(exc).__name__, message=str(exc))
        raise
    finally:
        log.close()
    return out


def _serve_aggregator(cfg, out, timeout, ready):
    net = network_config(cfg, cfg.data.p)
    history = out / "history.jsonl"
    history.write_text("", encoding="utf-8")
    with channels.listen(cfg.transport.address) as listener:
        if ready:
            ready(listener.address)
        peers = channels.accept_by_sender(listener, [c.id for c in cfg.partition.collaborators], timeout)
    try:
        t = cfg.training
        agg = hfl.HflAggregator(net, t.rounds, peers, t.aggregation, timeout, on_record=_append(history))
        params, _ = agg.run()
    finally:
        for ep in peers.values():
            ep.close()
    save_model(out / "model_global.fcm", params, net.seed)


def _serve_label_worker(cfg, out, timeout, ready):
    splits = prepare(cfg)
    holder = _by_id(splits, cfg.partition.label_holder().id)
    plan = vfl_plan(cfg, splits)
    t = cfg.training
    with channels.listen(cfg.transport.address) as listener:
        if ready:
            ready(listener.address)
        peers = channels.accept_by_sender(listener, [s.id for s in splits if s.id != holder.id], timeout)
    try:
        worker = vfl.LabelHolder(holder.id, holder.train, plan.architecture, peers, t.epochs, t.batch_size,
                                 t.learning_rate, cfg.seed, holder.test, timeout)
        res = worker.run()
    finally:
        for ep in peers.values():
            ep.close()
    (out / "history.jsonl").write_text("".join(r.to_json() + "\n" for r in res.history), encoding="utf-8")
    summary = vfl.VflResult({holder.id: res.head}, res.tail, res.history, res.predictions, holder.id)
    EvaluationReport(summary.evaluation_rows(holder.name, plan.label_holder())).write(out / "report.jsonl")
    if res.head is not None:
        save_model(out / f"model_{holder.name}_head.fcm", res.head, plan.architecture.head_configs[holder.id].seed)
    save_model(out / "model_tail.fcm", res.tail, plan.architecture.tail_config.seed)
