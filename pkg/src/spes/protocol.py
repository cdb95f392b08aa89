"""Parameter-server and worker state machines.

Both sides are transport-agnostic: ``handle`` consumes one decoded message
and returns the messages to send. Every message is validated completely
before any state changes, so a rejected message leaves the machine exactly
as it was.

Round flow (wire round numbers):

    worker  HELLO                      -> server
    server  ASSIGN                     -> worker
    server  GLOBAL_MODEL(r0)           -> all        (once every HELLO is in)
    worker  LOCAL_UPDATE(t), ROUND_DONE(t)            t = r0+1 .. T
    server  [MERGE_APPLIED(t)], GLOBAL_MODEL(t) -> all
    server  BYE -> all after GLOBAL_MODEL(T); workers answer BYE
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .merging import MergeEvent, MergeSchedule, merge_model
from .model import ModelConfig, Params, expert_blocks, is_expert_block, expert_index, param_shapes, shared_block_names
from .trainer import NodeTrainer, OuterOptimizer
from .wire import (
    Assignment,
    BarrierViolation,
    CommLedger,
    ConfigHashMismatch,
    DuplicatePush,
    Kind,
    MalformedPayload,
    Message,
    NonOwnedBlock,
    OutOfOrder,
    RoundMismatch,
    decode_assign,
    decode_blocks,
    decode_hello,
    decode_json,
    encode_assign,
    encode_blocks,
    encode_hello,
    encode_json,
)

MODES = ("spes", "diloco")


# --- aggregation ------------------------------------------------------------------


def aggregate_spes(cfg: ModelConfig, theta: Mapping[str, np.ndarray], updates: Mapping[int, Mapping[str, np.ndarray]], nodes: int) -> Params:
    """Shared blocks: mean over nodes. Expert blocks: taken verbatim from their unique owner."""
    if len(updates) != nodes:
        raise BarrierViolation(f"aggregation with {len(updates)} of {nodes} updates")
    order = sorted(updates)
    out = dict(theta)
    for name in shared_block_names(cfg):
        acc = np.zeros(theta[name].shape, dtype=np.float64)
        for i in order:
            acc += updates[i][name]
        out[name] = (acc / nodes).astype(theta[name].dtype)
    seen: dict[str, int] = {}
    for i in order:
        for name, a in updates[i].items():
            if not is_expert_block(name):
                continue
            if name in seen:
                raise NonOwnedBlock(f"expert block {name} pushed by nodes {seen[name]} and {i}")
            seen[name] = i
            out[name] = a
    return out


def full_model_names(cfg: ModelConfig) -> list[str]:
    return [n for n, _ in param_shapes(cfg)]


def validate_blocks(cfg: ModelConfig, blocks: Mapping[str, np.ndarray], expected: set[str], owned: set[int] | None) -> None:
    shapes = dict(param_shapes(cfg))
    for name, a in blocks.items():
        if name not in shapes:
            raise MalformedPayload(f"unknown block {name!r}")
        if owned is not None and is_expert_block(name) and expert_index(name) not in owned:
            raise NonOwnedBlock(f"block {name} belongs to an expert this node does not own")
        if tuple(a.shape) != shapes[name]:
            raise MalformedPayload(f"block {name}: shape {tuple(a.shape)}, expected {shapes[name]}")
        if not np.isfinite(a).all():
            raise MalformedPayload(f"block {name} carries non-finite values")
    missing = expected - set(blocks)
    if missing:
        raise MalformedPayload(f"{len(missing)} required blocks missing, e.g. {sorted(missing)[0]}")


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str | Path, theta: Mapping[str, np.ndarray], rnd: int) -> None:
    Path(path).write_bytes(encode_blocks(theta) + struct.pack("<Q", rnd))


def load_checkpoint(path: str | Path) -> tuple[Params, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise MalformedPayload("checkpoint too short")
    (rnd,) = struct.unpack("<Q", raw[-8:])
    return decode_blocks(raw[:-8]), rnd


# --- server ------------------------------------------------------------------------


@dataclass
class ServerSpec:
    cfg: ModelConfig
    nodes: int
    rounds: int
    partition: list[list[int]]
    config_hash: bytes
    mode: str = "spes"
    merge: MergeSchedule | None = None
    outer: OuterOptimizer | None = None
    start_round: int = 0
    checkpoint: str | Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.partition) != self.nodes:
            raise ValueError("partition must have one entry per node")
        if self.mode == "diloco" and self.outer is None:
            self.outer = OuterOptimizer("nesterov", lr=0.7, momentum=0.9)


RoundHook = Callable[[int, Params, dict, "MergeEvent | None"], None]


class Server:
    """Authoritative holder of theta; aggregates once every node has pushed."""

    def __init__(self, spec: ServerSpec, theta0: Mapping[str, np.ndarray], on_round: RoundHook | None = None):
        self.spec = spec
        names = full_model_names(spec.cfg)
        if set(theta0) != set(names):
            raise ValueError("initial parameters do not match the model config")
        self.theta: Params = {n: np.asarray(theta0[n], dtype=np.float32) for n in names}
        self.on_round = on_round
        self.ledger = CommLedger()
        self.phase = "hello"
        self.round = spec.start_round
        self.node_of: dict[object, int] = {}
        self.channel_of: dict[int, object] = {}
        self.updates: dict[int, dict[str, np.ndarray]] = {}
        self.done_metrics: dict[int, dict] = {}
        self.byes: set[int] = set()
        self.merge_events: list[MergeEvent] = []
        self.shared = set(shared_block_names(spec.cfg))

    @property
    def finished(self) -> bool:
        return self.phase == "done"

    def expected_blocks(self, node: int) -> set[str]:
        return self.shared | set(expert_blocks(self.spec.cfg, self.spec.partition[node]))

    def _node(self, channel) -> int:
        if channel not in self.node_of:
            raise OutOfOrder(f"message from channel {channel!r} before HELLO")
        return self.node_of[channel]

    def _send(self, node: int, msg: Message, blocks=None) -> tuple[object, Message]:
        self.ledger.record("down", node, msg, blocks)
        return self.channel_of[node], msg

    def _broadcast_model(self) -> list:
        payload = encode_blocks(self.theta)
        msg = Message(Kind.GLOBAL_MODEL, self.round, payload)
        out = [self._send(i, msg, self.theta) for i in range(self.spec.nodes)]
        if self.round >= self.spec.rounds:
            out += [self._send(i, Message(Kind.BYE, self.round)) for i in range(self.spec.nodes)]
            self.phase = "bye"
            if self.spec.checkpoint is not None:
                save_checkpoint(self.spec.checkpoint, self.theta, self.round)
        else:
            self.phase = "train"
        return out

    def handle(self, channel, msg: Message) -> list[tuple[object, Message]]:
        handler = {
            Kind.HELLO: self._on_hello,
            Kind.LOCAL_UPDATE: self._on_update,
            Kind.ROUND_DONE: self._on_done,
            Kind.BYE: self._on_bye,
        }.get(msg.kind)
        if handler is None:
            raise OutOfOrder(f"server does not accept {msg.kind.name}")
        return handler(channel, msg)

    def _on_hello(self, channel, msg: Message):
        if self.phase != "hello":
            raise OutOfOrder(f"HELLO during phase {self.phase}")
        node, h = decode_hello(msg.payload)
        if h != self.spec.config_hash:
            raise ConfigHashMismatch(f"node {node} config hash {h.hex()[:12]} != {self.spec.config_hash.hex()[:12]}")
        if node >= self.spec.nodes:
            raise MalformedPayload(f"node id {node} out of range for {self.spec.nodes} nodes")
        if node in self.channel_of or channel in self.node_of:
            raise OutOfOrder(f"duplicate HELLO for node {node}")
        self.ledger.record("up", node, msg)
        self.node_of[channel] = node
        self.channel_of[node] = channel
        a = Assignment(node, self.spec.nodes, self.spec.rounds, self.spec.start_round, tuple(self.spec.partition[node]))
        out = [self._send(node, Message(Kind.ASSIGN, 0, encode_assign(a)))]
        if len(self.channel_of) == self.spec.nodes:
            out += self._broadcast_model()
        return out

    def _check_round(self, node: int, msg: Message) -> None:
        if self.phase != "train":
            raise OutOfOrder(f"{msg.kind.name} from node {node} during phase {self.phase}")
        if msg.round != self.round + 1:
            raise RoundMismatch(f"{msg.kind.name} from node {node} for round {msg.round}, expected {self.round + 1}")

    def _on_update(self, channel, msg: Message):
        node = self._node(channel)
        self._check_round(node, msg)
        if node in self.updates:
            raise DuplicatePush(f"node {node} pushed twice in round {msg.round}")
        blocks = decode_blocks(msg.payload)
        validate_blocks(self.spec.cfg, blocks, self.expected_blocks(node), set(self.spec.partition[node]))
        self.ledger.record("up", node, msg, blocks)
        self.updates[node] = blocks
        return self._maybe_aggregate()

    def _on_done(self, channel, msg: Message):
        node = self._node(channel)
        self._check_round(node, msg)
        if node not in self.updates:
            raise OutOfOrder(f"ROUND_DONE from node {node} before its LOCAL_UPDATE")
        if node in self.done_metrics:
            raise DuplicatePush(f"node {node} sent ROUND_DONE twice in round {msg.round}")
        metrics = decode_json(msg.payload)
        self.ledger.record("up", node, msg)
        self.done_metrics[node] = metrics
        return self._maybe_aggregate()

    def _maybe_aggregate(self):
        N = self.spec.nodes
        if len(self.updates) < N or len(self.done_metrics) < N:
            return []
        t = self.round + 1
        cfg = self.spec.cfg
        if self.spec.mode == "spes":
            theta = aggregate_spes(cfg, self.theta, self.updates, N)
        else:
            deltas = [
                {n: u[n].astype(np.float64) - self.theta[n].astype(np.float64) for n in u}
                for _, u in sorted(self.updates.items())
            ]
            theta = self.spec.outer.step(self.theta, deltas, expected=N)
        event = None
        sched = self.spec.merge
        if sched is not None and sched.active(t - 1):
            theta, event = merge_model(cfg, theta, sched, t - 1)
            self.merge_events.append(event)
        metrics = dict(sorted(self.done_metrics.items()))
        self.theta = theta
        self.round = t
        self.updates = {}
        self.done_metrics = {}
        if self.on_round is not None:
            self.on_round(t, self.theta, metrics, event)
        out = []
        if event is not None:
            payload = encode_json(event.to_dict())
            out += [self._send(i, Message(Kind.MERGE_APPLIED, t, payload)) for i in range(N)]
        return out + self._broadcast_model()

    def _on_bye(self, channel, msg: Message):
        node = self._node(channel)
        if self.phase != "bye":
            raise OutOfOrder(f"BYE from node {node} during phase {self.phase}")
        if node in self.byes:
            raise OutOfOrder(f"duplicate BYE from node {node}")
        self.ledger.record("up", node, msg)
        self.byes.add(node)
        if len(self.byes) == self.spec.nodes:
            self.phase = "done"
        return []


# --- worker -------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    losses: dict
    frozen_intact: bool
    pushed_blocks: tuple[str, ...]
    merge: dict | None = None
    drift_sq: list = field(default_factory=list)
    update_norms: list = field(default_factory=list)
    lrs: list = field(default_factory=list)


class Worker:
    """Stateless across rounds apart from optional optimizer state inside the trainer."""

    def __init__(self, node: int, cfg: ModelConfig, config_hash: bytes, trainer: NodeTrainer):
        self.node = node
        self.cfg = cfg
        self.config_hash = config_hash
        self.trainer = trainer
        self.phase = "init"
        self.assignment: Assignment | None = None
        self.expected = 0
        self.theta: Params | None = None
        self.records: list[RoundRecord] = []
        self._names = set(full_model_names(cfg))

    @property
    def finished(self) -> bool:
        return self.phase == "done"

    def start(self) -> list[Message]:
        if self.phase != "init":
            raise OutOfOrder("worker already started")
        self.phase = "assign"
        return [Message(Kind.HELLO, 0, encode_hello(self.node, self.config_hash))]

    def handle(self, msg: Message) -> list[Message]:
        handler = {
            Kind.ASSIGN: self._on_assign,
            Kind.GLOBAL_MODEL: self._on_model,
            Kind.MERGE_APPLIED: self._on_merge,
            Kind.BYE: self._on_bye,
        }.get(msg.kind)
        if handler is None:
            raise OutOfOrder(f"worker does not accept {msg.kind.name}")
        return handler(msg)

    def _on_assign(self, msg: Message):
        if self.phase != "assign":
            raise OutOfOrder(f"ASSIGN during phase {self.phase}")
        a = decode_assign(msg.payload)
        if a.node != self.node:
            raise MalformedPayload(f"ASSIGN for node {a.node} delivered to node {self.node}")
        if any(j >= self.cfg.experts_total for j in a.experts) or not a.experts:
            raise MalformedPayload(f"invalid expert set {a.experts}")
        self.assignment = a
        self.expected = a.start_round
        self.phase = "model"
        return []

    def _on_model(self, msg: Message):
        if self.phase != "model":
            raise OutOfOrder(f"GLOBAL_MODEL during phase {self.phase}")
        if msg.round != self.expected:
            raise RoundMismatch(f"GLOBAL_MODEL for round {msg.round}, expected {self.expected}")
        blocks = decode_blocks(msg.payload)
        validate_blocks(self.cfg, blocks, self._names, None)
        self.theta = blocks
        a = self.assignment
        if msg.round >= a.rounds:
            self.phase = "bye"
            return []
        t = msg.round + 1
        entry = {n: blocks[n].tobytes() for n in blocks}
        res, mask = self.trainer.run(self.node, t, blocks, a.experts)
        intact = all(res.params[n].tobytes() == entry[n] for n in blocks if n not in mask)
        update = {n: res.params[n] for n in full_model_names(self.cfg) if n in mask}
        losses = {k: float(np.mean([row[k] for row in res.losses])) for k in res.losses[0]}
        counts = res.expert_counts.sum(axis=0).tolist()
        self.records.append(
            RoundRecord(t, losses, intact, tuple(update), None, res.drift_sq, res.update_norms, res.lrs)
        )
        self.expected = t
        summary = {"losses": losses, "expert_counts": counts, "steps": res.steps, "frozen_intact": intact}
        return [Message(Kind.LOCAL_UPDATE, t, encode_blocks(update)), Message(Kind.ROUND_DONE, t, encode_json(summary))]

    def _on_merge(self, msg: Message):
        if self.phase != "model":
            raise OutOfOrder(f"MERGE_APPLIED during phase {self.phase}")
        if msg.round != self.expected or not self.records:
            raise RoundMismatch(f"MERGE_APPLIED for round {msg.round}, expected {self.expected}")
        self.records[-1].merge = decode_json(msg.payload)
        return []

    def _on_bye(self, msg: Message):
        if self.phase != "bye":
            raise OutOfOrder(f"BYE during phase {self.phase}")
        self.phase = "done"
        return [Message(Kind.BYE, msg.round)]
