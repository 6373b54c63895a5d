"""Horizontal federation: local epochs at each collaborator, FedAvg at the aggregator.

Per round ``t``:

1. aggregator -> each collaborator: ``GlobalModel(t)`` holding F_{t-1}
2. collaborator trains its local epochs on its own rows, replies
   ``LocalUpdate(t)`` and a ``MetricsReport(t)`` on the update
3. aggregator waits for every update, averages them in ascending
   collaborator-id order into F_t and sends ``RoundComplete(t)`` with F_t
4. collaborator evaluates F_t on its own rows and replies ``MetricsReport(t)``

After the last round the aggregator sends ``Shutdown``. The aggregator holds
channels and a network config only; it never sees a dataset.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nncore
from .datagen import TabularDataset
from .errors import (
    AggregationError,
    ChannelError,
    ConfigError,
    DecodeError,
    NumericError,
    OrchestrationError,
    ProtocolError,
    ProtocolVersionError,
    ShapeError,
    TrainingDivergedError,
    UndefinedDenominatorError,
    UnsupportedVersionError,
)
from .metrics import mean_squared_error, percentage_error
from .nncore import NetworkConfig, NetworkParams
from .rng import Stream, derive_seed
from .transport import channels
from .transport.codec import (
    PROTOCOL_VERSION,
    JoinAck,
    JoinRequest,
    JoinStatus,
    MessageEnvelope,
    MetricsPayload,
    MsgType,
    ParamsPayload,
    Role,
    ShutdownPayload,
    ShutdownReason,
)

AGGREGATOR_ID = 0


def collaborator_seed(plan_seed: int, collaborator_id: int) -> int:
    return derive_seed(plan_seed, collaborator_id)


def epoch_seed(base_seed: int, epoch: int) -> int:
    """Shuffle seed for the ``epoch``-th local epoch (1-based, counted across rounds)."""
    return derive_seed(base_seed, epoch)


def local_epoch(params: NetworkParams, train: TabularDataset, batch_size: int, lr: float, seed: int) -> NetworkParams:
    """One pass over ``train`` in seeded shuffled minibatches, MSE + SGD per batch."""
    new_params, _ = local_epoch_with_loss(params, train, batch_size, lr, seed)
    return new_params


def local_epoch_with_loss(params, train, batch_size, lr, seed):
    if not train.has_labels:
        raise ConfigError("local training needs labels")
    if train.p != params.input_width:
        raise ShapeError(f"model expects {params.input_width} features, data has {train.p}")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    order = Stream(seed).permutation(train.n)
    x, y = train.features, train.labels
    total = 0.0
    for start in range(0, train.n, batch_size):
        rows = order[start : start + batch_size]
        try:
            params, loss = nncore.train_step(params, x[rows], y[rows], lr)
        except NumericError as exc:
            raise TrainingDivergedError(f"training diverged: {exc}") from exc
        total += loss * rows.size
    return params, (total / train.n if train.n else 0.0)


def train_local(params, train, epochs, batch_size, lr, base_seed, first_epoch=1):
    """``epochs`` consecutive local epochs, reseeding each from ``base_seed``."""
    for e in range(first_epoch, first_epoch + epochs):
        params = local_epoch(params, train, batch_size, lr, epoch_seed(base_seed, e))
    return params


def aggregation_weights(kind: str, sample_counts: Sequence[int]) -> list[float]:
    if kind == "equal":
        return [1.0 / len(sample_counts)] * len(sample_counts)
    if kind == "sample_size":
        total = sum(sample_counts)
        if total <= 0:
            raise AggregationError("sample_size weighting needs a positive sample total")
        return [c / total for c in sample_counts]
    raise ConfigError(f"aggregation weights must be 'equal' or 'sample_size', got {kind!r}")


def aggregate(updates: Sequence[NetworkParams], weights: Sequence[float]) -> NetworkParams:
    """Weighted elementwise mean of flattened parameters, summed in list order.

    Computed as ``u0 + sum_i w_i (u_i - u0)``, which equals ``sum_i w_i u_i``
    when the weights sum to one.
    """
    if not updates or len(updates) != len(weights):
        raise AggregationError(f"{len(updates)} updates with {len(weights)} weights")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise AggregationError(f"weights must be finite and nonnegative, got {list(weights)}")
    if abs(math.fsum(weights) - 1.0) > 1e-12:
        raise AggregationError(f"weights sum to {math.fsum(weights)}, not 1")
    first = updates[0]
    for k, u in enumerate(updates[1:], 1):
        if not first.same_shape(u) or u.activations != first.activations:
            raise AggregationError(f"update {k} is not shape-congruent with update 0")
    # anchored at the first update, so identical updates average to themselves exactly
    base = nncore.flatten(first)
    delta = np.zeros_like(base)
    for w, u in zip(weights[1:], updates[1:]):
        delta = delta + w * (nncore.flatten(u) - base)
    return nncore.unflatten(base + delta, nncore.config_of(first))


# -- round records -----------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    global_checksum: str
    collaborators: dict[int, dict[str, dict[str, float]]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "global_checksum": self.global_checksum,
                "collaborators": {str(k): v for k, v in sorted(self.collaborators.items())},
            },
            sort_keys=True,
        )


def write_history(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def training_metrics(params: NetworkParams, ds: TabularDataset) -> dict[str, float]:
    y_hat = nncore.predict(params, ds.features, batch_size=4096)
    out = {"train_mse": mean_squared_error(ds.labels, y_hat)}
    try:
        out["train_pe"] = percentage_error(ds.labels, y_hat)
    except UndefinedDenominatorError:
        pass
    if not all(math.isfinite(v) for v in out.values()):
        raise TrainingDivergedError("training metrics are not finite")
    return out


# -- roles -------------------------------------------------------------------


class HflAggregator:
    """Central server: broadcasts, waits at a per-round barrier, averages.

    Its only inputs are a network config, the round count and one channel per
    collaborator id; there is no path from here to any dataset.
    """

    def __init__(
        self,
        network: NetworkConfig,
        rounds: int,
        channels_by_id: Mapping[int, channels.Endpoint],
        aggregation: str = "equal",
        timeout: float = channels.DEFAULT_TIMEOUT,
        on_record: Callable[[RoundRecord], None] | None = None,
    ):
        network.require_scalar_output()
        if rounds < 1:
            raise ConfigError("rounds must be positive")
        if not channels_by_id:
            raise ConfigError("need at least one collaborator channel")
        self.network = network
        self.rounds = rounds
        self.channels = dict(sorted(channels_by_id.items()))
        self.aggregation = aggregation
        self.timeout = timeout
        self.on_record = on_record
        self._round = 0
        aggregation_weights(aggregation, [1] * len(self.channels))

    def _recv(self, cid, round_):
        try:
            return self.channels[cid].recv(self.timeout)
        except (ChannelError, DecodeError) as exc:
            raise OrchestrationError(
                f"round {round_}: lost collaborator {cid}: {exc}", round=round_, collaborator=cid
            ) from exc

    def _send(self, cid, msg):
        try:
            self.channels[cid].send(msg)
        except ChannelError as exc:
            raise OrchestrationError(
                f"round {msg.round}: cannot reach collaborator {cid}: {exc}",
                round=msg.round, collaborator=cid,
            ) from exc

    def _expect(self, cid, round_, msg_type):
        msg = self._recv(cid, round_)
        if msg.msg_type is MsgType.SHUTDOWN:
            reason = msg.payload.reason
            if reason is ShutdownReason.DIVERGED:
                raise TrainingDivergedError(
                    f"round {round_}: collaborator {cid} diverged", round=round_, collaborator=cid
                )
            raise OrchestrationError(
                f"round {round_}: collaborator {cid} aborted ({reason.name.lower()})",
                round=round_, collaborator=cid,
            )
        if msg.msg_type is not msg_type or msg.sender_id != cid or msg.round != round_:
            raise ProtocolError(
                f"round {round_}: expected {msg_type.name} from {cid}, got "
                f"{msg.msg_type.name} round {msg.round} from {msg.sender_id}"
            )
        return msg

    def _join(self) -> dict[int, int]:
        counts = {}
        for cid, ch in self.channels.items():
            try:
                msg = ch.recv(self.timeout)
            except UnsupportedVersionError as exc:
                self._send(cid, _ack(JoinStatus.VERSION_MISMATCH))
                raise ProtocolVersionError(
                    f"collaborator {cid} speaks protocol version {exc.version}, "
                    f"expected {PROTOCOL_VERSION}"
                ) from exc
            except (ChannelError, DecodeError) as exc:
                raise OrchestrationError(
                    f"round 0: collaborator {cid} failed to join: {exc}", round=0, collaborator=cid
                ) from exc
            if msg.msg_type is not MsgType.JOIN_REQUEST or msg.sender_id != cid:
                raise ProtocolError(f"expected JoinRequest from {cid}, got {msg.msg_type.name}")
            req = msg.payload
            status = JoinStatus.ACCEPTED
            if req.role is not Role.COLLABORATOR:
                status = JoinStatus.BAD_ROLE
            elif req.feature_count != self.network.layer_sizes[0]:
                status = JoinStatus.SHAPE_MISMATCH
            self._send(cid, _ack(status))
            if status is not JoinStatus.ACCEPTED:
                raise ProtocolError(f"collaborator {cid} rejected: {status.name.lower()}")
            counts[cid] = req.sample_count
        return counts

    def run(self) -> tuple[NetworkParams, list[RoundRecord]]:
        try:
            return self._run()
        except BaseException:
            self._broadcast_shutdown(ShutdownReason.ERROR)
            raise

    def _broadcast_shutdown(self, reason):
        for ch in self.channels.values():
            try:
                ch.send(MessageEnvelope(MsgType.SHUTDOWN, self._round, AGGREGATOR_ID, ShutdownPayload(reason)))
            except ChannelError:
                pass

    def _run(self):
        counts = self._join()
        ids = list(self.channels)
        weights = aggregation_weights(self.aggregation, [counts[c] for c in ids])
        global_params = nncore.init_network(self.network)
        records = []
        for t in range(1, self.rounds + 1):
            self._round = t
            payload = ParamsPayload(nncore.flatten(global_params))
            for cid in ids:
                self._send(cid, MessageEnvelope(MsgType.GLOBAL_MODEL, t, AGGREGATOR_ID, payload))
            updates, record = [], RoundRecord(t, "")
            for cid in ids:
                msg = self._expect(cid, t, MsgType.LOCAL_UPDATE)
                try:
                    updates.append(nncore.unflatten(msg.payload.values, self.network))
                except ShapeError as exc:
                    raise ProtocolError(f"round {t}: bad update from {cid}: {exc}") from exc
                metrics = self._expect(cid, t, MsgType.METRICS_REPORT)
                record.collaborators[cid] = {"pre": metrics.payload.as_dict()}
            global_params = aggregate(updates, weights)
            record.global_checksum = global_params.checksum()
            done = ParamsPayload(nncore.flatten(global_params))
            for cid in ids:
                self._send(cid, MessageEnvelope(MsgType.ROUND_COMPLETE, t, AGGREGATOR_ID, done))
            for cid in ids:
                metrics = self._expect(cid, t, MsgType.METRICS_REPORT)
                record.collaborators[cid]["post"] = metrics.payload.as_dict()
            records.append(record)
            if self.on_record:
                self.on_record(record)
        final_round = self.rounds + 1
        for cid in ids:
            self._send(cid, MessageEnvelope(MsgType.SHUTDOWN, final_round, AGGREGATOR_ID, ShutdownPayload()))
        return global_params, records


def _ack(status):
    return MessageEnvelope(MsgType.JOIN_ACK, 0, AGGREGATOR_ID, JoinAck(status))


class HflCollaborator:
    """Data owner: trains locally on request and reports parameters and metrics."""

    def __init__(
        self,
        collaborator_id: int,
        train: TabularDataset,
        channel: channels.Endpoint,
        network: NetworkConfig,
        batch_size: int,
        learning_rate: float,
        local_epochs: int = 1,
        seed: int = 0,
        timeout: float = channels.DEFAULT_TIMEOUT,
        protocol_version: int = PROTOCOL_VERSION,
    ):
        if not 1 <= collaborator_id < 2**16:
            raise ConfigError("collaborator ids must be in 1..65535 (0 is the aggregator)")
        if not train.has_labels:
            raise ConfigError(f"collaborator {collaborator_id} has no labels")
        self.id = collaborator_id
        self._train = train
        self.channel = channel
        self.network = network
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.local_epochs = local_epochs
        self.seed = seed
        self.timeout = timeout
        self.protocol_version = protocol_version

    def _send(self, msg_type, round_, payload):
        self.channel.send(
            MessageEnvelope(msg_type, round_, self.id, payload, protocol_version=self.protocol_version)
        )

    def _recv(self):
        return self.channel.recv(self.timeout)

    def run(self) -> NetworkParams:
        """Serve rounds until Shutdown; returns the last aggregated model."""
        self._send(
            MsgType.JOIN_REQUEST, 0,
            JoinRequest(Role.COLLABORATOR, self._train.n, self._train.p),
        )
        ack = self._recv()
        if ack.msg_type is not MsgType.JOIN_ACK:
            raise ProtocolError(f"expected JoinAck, got {ack.msg_type.name}")
        if ack.payload.status is JoinStatus.VERSION_MISMATCH:
            raise ProtocolVersionError(
                f"aggregator rejected protocol version {self.protocol_version}"
            )
        if ack.payload.status is not JoinStatus.ACCEPTED:
            raise ProtocolError(f"join rejected: {ack.payload.status.name.lower()}")

        latest = None
        last_round = 0
        while True:
            msg = self._recv()
            if msg.round < last_round:
                raise ProtocolError(f"round went backwards: {msg.round} after {last_round}")
            last_round = msg.round
            if msg.msg_type is MsgType.SHUTDOWN:
                if msg.payload.reason is not ShutdownReason.NORMAL:
                    raise OrchestrationError(
                        f"aggregator aborted the federation in round {msg.round}", round=msg.round
                    )
                if latest is None:
                    raise ProtocolError("shutdown before any aggregated model")
                return latest
            if msg.msg_type is MsgType.GLOBAL_MODEL:
                params = nncore.unflatten(msg.payload.values, self.network)
                try:
                    first = (msg.round - 1) * self.local_epochs + 1
                    params = train_local(
                        params, self._train, self.local_epochs, self.batch_size,
                        self.learning_rate, self.seed, first_epoch=first,
                    )
                    metrics = training_metrics(params, self._train)
                except TrainingDivergedError:
                    self._send(MsgType.SHUTDOWN, msg.round, ShutdownPayload(ShutdownReason.DIVERGED))
                    raise
                self._send(MsgType.LOCAL_UPDATE, msg.round, ParamsPayload(nncore.flatten(params)))
                self._send(MsgType.METRICS_REPORT, msg.round, MetricsPayload(tuple(sorted(metrics.items()))))
            elif msg.msg_type is MsgType.ROUND_COMPLETE:
                latest = nncore.unflatten(msg.payload.values, self.network)
                metrics = training_metrics(latest, self._train)
                self._send(MsgType.METRICS_REPORT, msg.round, MetricsPayload(tuple(sorted(metrics.items()))))
            else:
                raise ProtocolError(f"unexpected {msg.msg_type.name} in round {msg.round}")


# -- in-process driver -------------------------------------------------------


@dataclass
class HflCollaboratorSpec:
    id: int
    train: TabularDataset
    test: TabularDataset | None = None
    seed: int | None = None  # shuffle seed; derived from the plan seed and id when None


@dataclass
class HflPlan:
    collaborators: list[HflCollaboratorSpec]
    network: NetworkConfig
    rounds: int
    batch_size: int
    learning_rate: float
    local_epochs_per_round: int = 1
    aggregation_weights: str = "equal"
    seed: int = 0

    def validate(self):
        if not self.collaborators:
            raise ConfigError("an HFL plan needs at least one collaborator")
        self.network.require_scalar_output()
        ids = [c.id for c in self.collaborators]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate collaborator ids {ids}")
        names = self.collaborators[0].train.feature_names
        for c in self.collaborators:
            if c.train.feature_names != names:
                raise ConfigError(f"collaborator {c.id} features differ from collaborator {ids[0]}")
            if not c.train.has_labels:
                raise ConfigError(f"collaborator {c.id} train set has no labels")
        if len(names) != self.network.layer_sizes[0]:
            raise ConfigError(f"network input width {self.network.layer_sizes[0]} != {len(names)} features")
        for name in ("rounds", "batch_size", "local_epochs_per_round"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        aggregation_weights(self.aggregation_weights, [1] * len(ids))

    def shuffle_seed(self, spec: HflCollaboratorSpec) -> int:
        return spec.seed if spec.seed is not None else collaborator_seed(self.seed, spec.id)


@dataclass
class HflResult:
    params: NetworkParams
    records: list[RoundRecord]
    collaborator_params: dict[int, NetworkParams]


def run_collaborators(workers, errors):
    """Start each worker's ``run`` in a thread; exceptions land in ``errors``."""
    results = {}

    def target(key, worker):
        try:
            results[key] = worker.run()
        except BaseException as exc:  # noqa: BLE001 - reported by the caller
            errors[key] = exc
        finally:
            worker.channel.close()

    threads = [
        threading.Thread(target=target, args=(key, w), name=f"worker-{key}", daemon=True)
        for key, w in workers.items()
    ]
    for t in threads:
        t.start()
    return threads, results


def connect_star(ids, transport: str, timeout: float, address: str = "127.0.0.1:0"):
    """Return ``(hub_side, spoke_side)`` endpoint dicts keyed by id.

    With the socket transport, spokes dial a loopback listener and the hub
    side is keyed by connection order; callers map it through JoinRequest.
    """
    if transport == "inproc":
        pairs = {i: channels.open_inproc_pair() for i in ids}
        return {i: p[0] for i, p in pairs.items()}, {i: p[1] for i, p in pairs.items()}
    if transport == "socket":
        hub, spokes = {}, {}
        with channels.listen(address) as listener:
            for i in ids:
                box = {}
                t = threading.Thread(target=lambda: box.update(ep=channels.dial(listener.address, timeout)))
                t.start()
                hub[i] = listener.accept(timeout)
                t.join()
                spokes[i] = box["ep"]
        return hub, spokes
    raise ConfigError(f"transport must be 'inproc' or 'socket', got {transport!r}")


def run_hfl(plan: HflPlan, transport: str = "inproc", timeout: float = channels.DEFAULT_TIMEOUT,
            on_record=None) -> HflResult:
    """Run a whole federation in this process: aggregator here, one thread per collaborator."""
    plan.validate()
    ids = [c.id for c in plan.collaborators]
    hub, spokes = connect_star(ids, transport, timeout)
    workers = {
        c.id: HflCollaborator(
            c.id, c.train, spokes[c.id], plan.network, plan.batch_size, plan.learning_rate,
            plan.local_epochs_per_round, plan.shuffle_seed(c), timeout,
        )
        for c in plan.collaborators
    }
    aggregator = HflAggregator(plan.network, plan.rounds, hub, plan.aggregation_weights, timeout, on_record)
    errors: dict = {}
    threads, results = run_collaborators(workers, errors)
    try:
        params, records = aggregator.run()
    except BaseException:
        for ep in hub.values():
            ep.close()
        for t in threads:
            t.join(timeout)
        # a collaborator-side failure explains the aggregator-side symptom
        for cid in sorted(errors):
            if isinstance(errors[cid], TrainingDivergedError):
                raise errors[cid]
        raise
    for t in threads:
        t.join(timeout)
    for ep in hub.values():
        ep.close()
    if errors:
        cid = sorted(errors)[0]
        raise errors[cid]
    return HflResult(params, records, results)
