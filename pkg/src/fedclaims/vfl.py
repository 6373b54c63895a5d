"""Vertical federation with a split network.

Every worker owns a head segment over its own feature columns. The single
label holder also owns the tail. Per batch:

1. each feature worker runs its head and sends ``ActivationBatch`` carrying a
   checksum of the batch's entity ids
2. the label holder checks alignment, concatenates all head outputs in
   ascending worker-id order, runs the tail, takes an MSE/SGD step on it
   and returns each worker's slice of d_loss/d_concat as ``GradientBatch``
3. each worker finishes backpropagation through its head and updates it

Segments never leave their owner; only activations, gradients and the final
Shutdown cross the channel. A label holder with no feature columns has no
head (width-0 block).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nncore
from .datagen import TabularDataset
from .errors import (
    ChannelError,
    ConfigError,
    DecodeError,
    NumericError,
    OrchestrationError,
    ProtocolError,
    ProtocolVersionError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from .hfl import connect_star, run_collaborators
from .metrics import EvaluationRow, evaluate_predictions
from .nncore import ForwardTrace, NetworkConfig, NetworkParams
from .rng import Stream, derive_seed
from .transport import channels
from .transport.codec import (
    PROTOCOL_VERSION,
    ActivationPayload,
    GradientPayload,
    JoinAck,
    JoinRequest,
    JoinStatus,
    MessageEnvelope,
    MsgType,
    Role,
    ShutdownPayload,
    ShutdownReason,
)

_EPOCH_TAG = 0x5646_4C45  # keeps VFL epoch seeds apart from HFL collaborator seeds
EVAL_BATCH = 4096

Observer = Callable[[int, str, int, NetworkParams], None]


def entity_checksum(entity_ids) -> int:
    """Order-sensitive 64-bit digest of a batch's entity ids."""
    data = np.ascontiguousarray(entity_ids, dtype="<u8").tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def vfl_epoch_seed(plan_seed: int, epoch: int) -> int:
    return derive_seed(plan_seed, _EPOCH_TAG, epoch)


def batch_schedule(n: int, batch_size: int, plan_seed: int, epoch: int) -> list[np.ndarray]:
    """Row indices of every batch in an epoch; identical at every worker."""
    order = Stream(vfl_epoch_seed(plan_seed, epoch)).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def eval_schedule(n: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + EVAL_BATCH, n)) for i in range(0, n, EVAL_BATCH)]


# -- split-step primitives ---------------------------------------------------


def head_forward(head: NetworkParams, batch) -> tuple[np.ndarray, ForwardTrace]:
    """Head outputs as a ``b x e`` matrix, plus the trace for head_backward."""
    _, trace = nncore.forward(head, batch)
    return trace.output, trace


def tail_step(tail: NetworkParams, blocks: Sequence[np.ndarray], labels, lr: float):
    """Forward/backward/SGD on the tail from head outputs ordered by worker id.

    Returns ``(new_tail, gradient_blocks, loss)`` where ``gradient_blocks[k]``
    is d_loss/d_(block k), with the same shape as ``blocks[k]``.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    widths = [np.shape(b)[1] for b in blocks]
    rows = {np.shape(b)[0] for b in blocks}
    if len(rows) != 1 or rows != {labels.size}:
        raise ShapeError(f"block rows {sorted(rows)} vs {labels.size} labels")
    if sum(widths) != tail.input_width:
        raise ShapeError(f"blocks of widths {widths} do not fill tail input {tail.input_width}")
    concat = np.concatenate([np.asarray(b, dtype=np.float64) for b in blocks], axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        pred, trace = nncore.forward(tail, concat)
        loss, d_pred = nncore.mse_loss(pred, labels)
        if not np.isfinite(loss):
            raise NumericError("tail loss is not finite")
        grads = nncore.backward(tail, trace, d_pred)
        new_tail = nncore.sgd_step(tail, grads, lr)
    bounds = np.cumsum([0, *widths])
    grad_blocks = [grads.d_input[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    return new_tail, grad_blocks, loss


def head_backward(head: NetworkParams, trace: ForwardTrace, grad_block, lr: float) -> NetworkParams:
    g = np.asarray(grad_block, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ProtocolError(
            f"gradient block {g.shape} does not match the pending activations {trace.output.shape}"
        )
    grads = nncore.backward(head, trace, g)
    return nncore.sgd_step(head, grads, lr)


def split_predict(heads: Mapping[int, NetworkParams | None], tail: NetworkParams,
                  features: Mapping[int, np.ndarray]) -> np.ndarray:
    """Tail predictions from aligned per-worker feature matrices."""
    blocks = [head_forward(heads[w], features[w])[0] for w in sorted(heads) if heads[w] is not None]
    pred, _ = nncore.forward(tail, np.concatenate(blocks, axis=1))
    return pred


# -- architecture ------------------------------------------------------------


@dataclass
class SplitArchitecture:
    head_configs: dict[int, NetworkConfig | None]
    tail_config: NetworkConfig

    def validate(self):
        self.tail_config.require_scalar_output()
        widths = [c.layer_sizes[-1] for _, c in sorted(self.head_configs.items()) if c is not None]
        if sum(widths) != self.tail_config.layer_sizes[0]:
            raise ConfigError(
                f"tail input width {self.tail_config.layer_sizes[0]} != sum of head outputs {sum(widths)}"
            )

    def block_widths(self) -> dict[int, int]:
        return {w: (0 if c is None else c.layer_sizes[-1]) for w, c in sorted(self.head_configs.items())}


def default_architecture(
    feature_counts: Mapping[int, int],
    seed: int,
    embedding_width: int = 8,
    head_hidden: Sequence[int] = (),
    tail_hidden: Sequence[int] = (8,),
    activation: str = "relu",
) -> SplitArchitecture:
    """Per-worker heads ``[p_k, *head_hidden, e]`` (relu at the cut) and a tail.

    ``activation`` applies to the hidden layers of heads and tail.
    """
    heads = {}
    for w, p in sorted(feature_counts.items()):
        heads[w] = None if p == 0 else NetworkConfig(
            [p, *head_hidden, embedding_width], [activation] * len(head_hidden),
            seed=derive_seed(seed, 1, w), output_activation="relu",
        )
    total = embedding_width * sum(1 for c in heads.values() if c is not None)
    tail = NetworkConfig([total, *tail_hidden, 1], [activation] * len(tail_hidden), seed=derive_seed(seed, 2))
    return SplitArchitecture(heads, tail)


# -- roles -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    batches: int

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "train_mse": self.train_mse, "batches": self.batches}, sort_keys=True)


class FeatureWorker:
    """Holds feature columns and a head segment. Never sees labels."""

    def __init__(self, worker_id: int, train: TabularDataset, head_config: NetworkConfig,
                 channel: channels.Endpoint, epochs: int, batch_size: int, learning_rate: float,
                 seed: int, test: TabularDataset | None = None,
                 timeout: float = channels.DEFAULT_TIMEOUT, protocol_version: int = PROTOCOL_VERSION,
                 observer: Observer | None = None):
        for ds in (train, test):
            if ds is not None and ds.has_labels:
                raise ConfigError(f"feature worker {worker_id} must not be given labels")
        if head_config.layer_sizes[0] != train.p:
            raise ConfigError(f"head of worker {worker_id} expects {head_config.layer_sizes[0]} features, has {train.p}")
        self.id = worker_id
        self._train = train
        self._test = test
        self.head = nncore.init_network(head_config)
        self.channel = channel
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.timeout = timeout
        self.protocol_version = protocol_version
        self.observer = observer

    def _send(self, msg_type, payload, round_=0):
        self.channel.send(MessageEnvelope(msg_type, round_, self.id, payload, self.protocol_version))

    def _send_activations(self, ds, rows, batch_id, epoch):
        acts, trace = head_forward(self.head, ds.features[rows])
        self._send(
            MsgType.ACTIVATION_BATCH,
            ActivationPayload.of(batch_id, acts, entity_checksum=entity_checksum(ds.entity_ids[rows])),
            epoch,
        )
        return trace

    def _recv(self):
        msg = self.channel.recv(self.timeout)
        if msg.msg_type is MsgType.SHUTDOWN and msg.payload.reason is not ShutdownReason.NORMAL:
            raise OrchestrationError(f"label holder aborted ({msg.payload.reason.name.lower()})")
        return msg

    def run(self) -> NetworkParams:
        self._send(MsgType.JOIN_REQUEST, JoinRequest(Role.FEATURE_WORKER, self._train.n, self._train.p))
        ack = self._recv()
        if ack.msg_type is not MsgType.JOIN_ACK:
            raise ProtocolError(f"expected JoinAck, got {ack.msg_type.name}")
        if ack.payload.status is JoinStatus.VERSION_MISMATCH:
            raise ProtocolVersionError(f"label holder rejected protocol version {self.protocol_version}")
        if ack.payload.status is not JoinStatus.ACCEPTED:
            raise ProtocolError(f"join rejected: {ack.payload.status.name.lower()}")

        batch_id = 0
        for epoch in range(1, self.epochs + 1):
            for rows in batch_schedule(self._train.n, self.batch_size, self.seed, epoch):
                trace = self._send_activations(self._train, rows, batch_id, epoch)
                msg = self._recv()
                if msg.msg_type is not MsgType.GRADIENT_BATCH or msg.payload.batch_id != batch_id:
                    raise ProtocolError(
                        f"expected gradients for batch {batch_id}, got {msg.msg_type.name}"
                        + (f" for batch {msg.payload.batch_id}" if msg.msg_type is MsgType.GRADIENT_BATCH else "")
                    )
                self.head = head_backward(self.head, trace, msg.payload.matrix(), self.learning_rate)
                if self.observer:
                    self.observer(self.id, "head", batch_id, self.head)
                batch_id += 1
        for ds in (self._train, self._test):
            if ds is None:
                continue
            for rows in eval_schedule(ds.n):
                self._send_activations(ds, rows, batch_id, self.epochs + 1)
                batch_id += 1
        msg = self._recv()
        if msg.msg_type is not MsgType.SHUTDOWN:
            raise ProtocolError(f"expected Shutdown, got {msg.msg_type.name}")
        return self.head


@dataclass
class LabelHolderResult:
    head: NetworkParams | None
    tail: NetworkParams
    history: list[EpochRecord]
    predictions: dict[str, np.ndarray]


class LabelHolder:
    """Feature-label worker: owns labels, its own head (if any) and the tail."""

    def __init__(self, worker_id: int, train: TabularDataset, architecture: SplitArchitecture,
                 channels_by_id: Mapping[int, channels.Endpoint], epochs: int, batch_size: int,
                 learning_rate: float, seed: int, test: TabularDataset | None = None,
                 timeout: float = channels.DEFAULT_TIMEOUT, observer: Observer | None = None):
        architecture.validate()
        if not train.has_labels:
            raise ConfigError(f"label holder {worker_id} has no labels")
        if worker_id not in architecture.head_configs:
            raise ConfigError(f"architecture has no entry for label holder {worker_id}")
        own = architecture.head_configs[worker_id]
        if (0 if own is None else own.layer_sizes[0]) != train.p:
            raise ConfigError(f"label holder head does not match its {train.p} features")
        self.id = worker_id
        self._train = train
        self._test = test
        self.widths = architecture.block_widths()
        self.head = None if own is None else nncore.init_network(own)
        self.tail = nncore.init_network(architecture.tail_config)
        self.peers = dict(sorted(channels_by_id.items()))
        expected = {w for w, c in architecture.head_configs.items() if w != worker_id}
        if set(self.peers) != expected:
            raise ConfigError(f"channels for {sorted(self.peers)} but feature workers are {sorted(expected)}")
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.timeout = timeout
        self.observer = observer
        self._epoch = 0

    def _recv(self, wid):
        try:
            return self.peers[wid].recv(self.timeout)
        except (ChannelError, DecodeError) as exc:
            raise OrchestrationError(
                f"epoch {self._epoch}: lost feature worker {wid}: {exc}", round=self._epoch, collaborator=wid
            ) from exc

    def _send(self, wid, msg):
        try:
            self.peers[wid].send(msg)
        except ChannelError as exc:
            raise OrchestrationError(
                f"epoch {self._epoch}: cannot reach feature worker {wid}: {exc}",
                round=self._epoch, collaborator=wid,
            ) from exc

    def _join(self):
        for wid, ch in self.peers.items():
            try:
                msg = ch.recv(self.timeout)
            except UnsupportedVersionError as exc:
                ch.send(MessageEnvelope(MsgType.JOIN_ACK, 0, self.id, JoinAck(JoinStatus.VERSION_MISMATCH)))
                raise ProtocolVersionError(
                    f"feature worker {wid} speaks protocol version {exc.version}, expected {PROTOCOL_VERSION}"
                ) from exc
            except (ChannelError, DecodeError) as exc:
                raise OrchestrationError(f"feature worker {wid} failed to join: {exc}", round=0, collaborator=wid) from exc
            if msg.msg_type is not MsgType.JOIN_REQUEST or msg.sender_id != wid:
                raise ProtocolError(f"expected JoinRequest from {wid}, got {msg.msg_type.name}")
            req = msg.payload
            status = JoinStatus.ACCEPTED
            if req.role is not Role.FEATURE_WORKER:
                status = JoinStatus.BAD_ROLE
            elif req.sample_count != self._train.n:
                status = JoinStatus.SHAPE_MISMATCH
            ch.send(MessageEnvelope(MsgType.JOIN_ACK, 0, self.id, JoinAck(status)))
            if status is not JoinStatus.ACCEPTED:
                raise ProtocolError(f"feature worker {wid} rejected: {status.name.lower()}")

    def _gather(self, ds, rows, batch_id):
        """Collect every worker's block for one batch, in ascending worker id."""
        checksum = entity_checksum(ds.entity_ids[rows])
        blocks, own_trace = [], None
        for wid in sorted(self.widths):
            if wid == self.id:
                if self.head is not None:
                    acts, own_trace = head_forward(self.head, ds.features[rows])
                    blocks.append(acts)
                continue
            msg = self._recv(wid)
            if msg.msg_type is not MsgType.ACTIVATION_BATCH:
                raise ProtocolError(f"expected activations from {wid}, got {msg.msg_type.name}")
            p = msg.payload
            if p.batch_id != batch_id:
                raise ProtocolError(f"worker {wid} sent batch {p.batch_id}, expected {batch_id}")
            if p.entity_checksum != checksum:
                raise ProtocolError(f"batch {batch_id}: entity alignment mismatch with worker {wid}")
            if p.rows != rows.size or p.cols != self.widths[wid]:
                raise ProtocolError(f"batch {batch_id}: worker {wid} block is {p.rows}x{p.cols}")
            blocks.append(p.matrix())
        return blocks, own_trace

    def run(self) -> LabelHolderResult:
        try:
            return self._run()
        except BaseException as exc:
            reason = ShutdownReason.DIVERGED if isinstance(exc, TrainingDivergedError) else ShutdownReason.ERROR
            for ch in self.peers.values():
                try:
                    ch.send(MessageEnvelope(MsgType.SHUTDOWN, self._epoch, self.id, ShutdownPayload(reason)))
                except ChannelError:
                    pass
            raise

    def _run(self):
        self._join()
        y = self._train.labels
        history = []
        batch_id = 0
        for epoch in range(1, self.epochs + 1):
            self._epoch = epoch
            total = 0.0
            schedule = batch_schedule(self._train.n, self.batch_size, self.seed, epoch)
            for rows in schedule:
                blocks, own_trace = self._gather(self._train, rows, batch_id)
                try:
                    self.tail, grad_blocks, loss = tail_step(self.tail, blocks, y[rows], self.learning_rate)
                except NumericError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}: {exc}", round=epoch) from exc
                k = 0
                for wid in sorted(self.widths):
                    if wid == self.id and self.head is None:
                        continue
                    g = grad_blocks[k]
                    k += 1
                    if wid == self.id:
                        self.head = head_backward(self.head, own_trace, g, self.learning_rate)
                    else:
                        self._send(wid, MessageEnvelope(
                            MsgType.GRADIENT_BATCH, epoch, self.id, GradientPayload.of(batch_id, g)))
                if self.observer:
                    self.observer(self.id, "tail", batch_id, self.tail)
                    if self.head is not None:
                        self.observer(self.id, "head", batch_id, self.head)
                total += loss * rows.size
                batch_id += 1
            history.append(EpochRecord(epoch, total / self._train.n, len(schedule)))

        self._epoch = self.epochs + 1
        predictions = {}
        for name, ds in (("train", self._train), ("test", self._test)):
            if ds is None:
                continue
            parts = []
            for rows in eval_schedule(ds.n):
                blocks, _ = self._gather(ds, rows, batch_id)
                pred, _ = nncore.forward(self.tail, np.concatenate(blocks, axis=1))
                parts.append(pred)
                batch_id += 1
            predictions[name] = np.concatenate(parts) if parts else np.empty(0)
        for wid in self.peers:
            self._send(wid, MessageEnvelope(MsgType.SHUTDOWN, self._epoch, self.id, ShutdownPayload()))
        return LabelHolderResult(self.head, self.tail, history, predictions)


# -- in-process driver -------------------------------------------------------


@dataclass
class VflWorkerSpec:
    id: int
    train: TabularDataset
    test: TabularDataset | None = None


@dataclass
class VflPlan:
    workers: list[VflWorkerSpec]
    architecture: SplitArchitecture
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int = 0

    def label_holder(self) -> VflWorkerSpec:
        holders = [w for w in self.workers if w.train.has_labels]
        if len(holders) != 1:
            raise ConfigError(f"exactly one label holder required, found {len(holders)}")
        return holders[0]

    def validate(self):
        self.architecture.validate()
        holder = self.label_holder()
        ids = [w.id for w in self.workers]
        if len(set(ids)) != len(ids) or any(not 1 <= i < 2**16 for i in ids):
            raise ConfigError(f"worker ids must be unique and in 1..65535, got {ids}")
        if set(ids) != set(self.architecture.head_configs):
            raise ConfigError("architecture heads must match the worker ids")
        for split in ("train", "test"):
            sets = [getattr(w, split) for w in self.workers]
            if split == "test" and all(s is None for s in sets):
                continue
            if any(s is None for s in sets):
                raise ConfigError(f"every worker needs a {split} set, or none")
            ref = getattr(holder, split).entity_ids
            for w, s in zip(self.workers, sets):
                if not np.array_equal(s.entity_ids, ref):
                    raise ConfigError(f"worker {w.id} {split} rows are not aligned with the label holder")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class VflResult:
    heads: dict[int, NetworkParams | None]
    tail: NetworkParams
    history: list[EpochRecord]
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    label_holder: int = 0

    def evaluation_rows(self, name: str, holder: VflWorkerSpec) -> list[EvaluationRow]:
        rows = []
        for split in ("train", "test"):
            ds = getattr(holder, split)
            if ds is not None and split in self.predictions:
                rows.append(evaluate_predictions(name, split, "vfl", ds.labels, self.predictions[split]))
        return rows


def run_vfl(plan: VflPlan, transport: str = "inproc", timeout: float = channels.DEFAULT_TIMEOUT,
            observer: Observer | None = None) -> VflResult:
    """Run a split-network federation: label holder here, feature workers in threads.

    ``observer(owner_id, "head" | "tail", batch_id, params)`` sees every segment
    right after its update, from whichever thread owns the segment.
    """
    plan.validate()
    holder = plan.label_holder()
    peer_ids = [w.id for w in plan.workers if w.id != holder.id]
    hub, spokes = connect_star(peer_ids, transport, timeout)
    workers = {
        w.id: FeatureWorker(
            w.id, w.train, plan.architecture.head_configs[w.id], spokes[w.id], plan.epochs,
            plan.batch_size, plan.learning_rate, plan.seed, w.test, timeout, observer=observer,
        )
        for w in plan.workers if w.id != holder.id
    }
    label_holder = LabelHolder(
        holder.id, holder.train, plan.architecture, hub, plan.epochs, plan.batch_size,
        plan.learning_rate, plan.seed, holder.test, timeout, observer=observer,
    )
    errors: dict = {}
    threads, results = run_collaborators(workers, errors)
    try:
        out = label_holder.run()
    finally:
        for t in threads:
            t.join(timeout)
        for ep in hub.values():
            ep.close()
    if errors:
        raise errors[sorted(errors)[0]]
    heads = {holder.id: out.head, **results}
    return VflResult(dict(sorted(heads.items())), out.tail, out.history, out.predictions, holder.id)
